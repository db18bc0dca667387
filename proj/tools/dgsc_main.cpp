#include "dgsc/cli.hpp"

int main(int argc, char** argv) { return dgsc::cli_main(argc, argv); }
