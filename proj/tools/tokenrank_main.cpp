#include "tokenrank/cli.hpp"

int main(int argc, char** argv) { return tokenrank::run_cli(argc, argv); }
