#ifndef IBS_ERRORS_HPP
#define IBS_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace ibs {

/** Base class for all library errors. Each error carries a short machine
 * readable kind string (stable across versions) and an exit category used
 * by the command line driver: 2 = construction/validation failure,
 * 3 = runtime flow failure, 4 = obstruction violation. */
class error : public std::runtime_error {
  public:
    error(std::string kind, const std::string& msg, int exit_category)
        : std::runtime_error(kind + ": " + msg),
          kind_(std::move(kind)), exit_category_(exit_category) {}
    const std::string& kind() const { return kind_; }
    int exit_category() const { return exit_category_; }
  private:
    std::string kind_;
    int exit_category_;
};

struct construction_error : error {
    construction_error(const std::string& kind, const std::string& msg)
        : error(kind, msg, 2) {}
};
struct flow_error : error {
    flow_error(const std::string& kind, const std::string& msg)
        : error(kind, msg, 3) {}
};

#define IBS_CONSTRUCTION_ERROR(Name) \
    struct Name : construction_error { \
        explicit Name(const std::string& msg) : construction_error(#Name, msg) {} \
    }

IBS_CONSTRUCTION_ERROR(NotUnimodular);
IBS_CONSTRUCTION_ERROR(NoInoueSpectrum);
IBS_CONSTRUCTION_ERROR(NoHyperbolicSpectrum);
IBS_CONSTRUCTION_ERROR(DegenerateEigenvector);
IBS_CONSTRUCTION_ERROR(RationalInput);
IBS_CONSTRUCTION_ERROR(InvalidR);
IBS_CONSTRUCTION_ERROR(KernelMismatch);
IBS_CONSTRUCTION_ERROR(ShapeMismatch);
IBS_CONSTRUCTION_ERROR(NotPositive);
IBS_CONSTRUCTION_ERROR(NonZeroMean);
IBS_CONSTRUCTION_ERROR(DivisorUnderflow);
IBS_CONSTRUCTION_ERROR(SeamMismatch);
IBS_CONSTRUCTION_ERROR(WindowTooSmall);
IBS_CONSTRUCTION_ERROR(DegenerateLattice);
IBS_CONSTRUCTION_ERROR(BadConfig);

#undef IBS_CONSTRUCTION_ERROR

struct PositivityLost : flow_error {
    explicit PositivityLost(const std::string& msg) : flow_error("PositivityLost", msg) {}
};
struct StepTooLarge : flow_error {
    explicit StepTooLarge(const std::string& msg) : flow_error("StepTooLarge", msg) {}
};
struct ObstructionViolated : error {
    explicit ObstructionViolated(const std::string& msg)
        : error("ObstructionViolated", msg, 4) {}
};

} // namespace ibs

#endif
