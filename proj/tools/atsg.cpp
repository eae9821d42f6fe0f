#include "atsg/cli.hpp"

int main(int argc, char** argv) { return atsg::cli::dispatch(argc, argv); }
