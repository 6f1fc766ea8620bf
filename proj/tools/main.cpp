#include "urbanform/cli.hpp"

int main(int argc, char** argv) { return urbanform::cli::dispatch(argc, argv); }
