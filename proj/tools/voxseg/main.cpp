#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "commands.hpp"
#include "voxseg/training.hpp"
#include "voxseg/version.hpp"

int main(int argc, char** argv) {
#ifdef _OPENMP
    if (const char* threads = std::getenv("VOXSEG_THREADS"))
        omp_set_num_threads(std::max(1, std::atoi(threads)));
#endif

    CLI::App app{"voxseg - volumetric brain-lesion segmentation toolkit"};
    app.set_version_flag("--version", std::string(voxseg::kVersion));
    voxseg::cli::register_commands(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const voxseg::TrainingDiverged& e) {
        std::cerr << "voxseg-error: class=diverged msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "voxseg-error: class=config msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::out_of_range& e) {
        std::cerr << "voxseg-error: class=config msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::runtime_error& e) {
        std::cerr << "voxseg-error: class=io msg=\"" << e.what() << "\"\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "voxseg-error: class=internal msg=\"" << e.what() << "\"\n";
        return 1;
    }
    return 0;
}
