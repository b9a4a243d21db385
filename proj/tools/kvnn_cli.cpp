#include "kvnn/cli.hpp"

int main(int argc, char** argv) { return kvnn::cli_main(argc, argv); }
