#include "fixelfit/commands.hpp"

int main(int argc, char** argv) { return fixelfit::run_cli(argc, argv); }
