#include "moetrack/cli.hpp"

int main(int argc, char** argv) { return moetrack::cli_main(argc, argv); }
