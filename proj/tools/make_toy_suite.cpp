// Regenerates the task files of a suite manifest from each task's ground
// truth and seed.

#include <filesystem>
#include <iostream>

#include "equate/bench.hpp"
#include "equate/io.hpp"

int main(int argc, char** argv) {
    if (argc != 2) {
        std::cerr << "usage: make_toy_suite <suite.json>\n";
        return 2;
    }
    try {
        const auto suite = equate::bench::load_suite(argv[1]);
        for (const auto& t : suite.tasks) {
            const auto path = (std::filesystem::path(suite.dir) / t.data).string();
            equate::io::write_table(path, equate::bench::generate_task_data(suite, t));
            std::cout << path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 3;
    }
    return 0;
}
