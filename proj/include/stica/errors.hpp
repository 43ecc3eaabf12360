#ifndef STICA_ERRORS_HPP
#define STICA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace stica {

/// Base class for every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

#define STICA_DEFINE_ERROR(Name)                                               \
    class Name : public Error                                                  \
    {                                                                          \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}  \
    }

// sparse linear algebra
STICA_DEFINE_ERROR(NotPositiveDefinite);
STICA_DEFINE_ERROR(DimensionMismatch);
STICA_DEFINE_ERROR(PatternNotCovering);
STICA_DEFINE_ERROR(InvalidMatrix);

// mesh
STICA_DEFINE_ERROR(InvalidDims);
STICA_DEFINE_ERROR(InvalidMesh);
STICA_DEFINE_ERROR(DegenerateTriangle);
STICA_DEFINE_ERROR(NonPositiveKappa);

// simulation / template
STICA_DEFINE_ERROR(TooFewSubjects);
STICA_DEFINE_ERROR(PoolTooSmall);

// preprocessing
STICA_DEFINE_ERROR(DegenerateData);
STICA_DEFINE_ERROR(RankDeficientMaps);
STICA_DEFINE_ERROR(EigGap);

// estimation
STICA_DEFINE_ERROR(SingularSecondMoment);

// inference / evaluation
STICA_DEFINE_ERROR(InsufficientSamples);
STICA_DEFINE_ERROR(ConstantColumn);
STICA_DEFINE_ERROR(ZeroEstimate);
STICA_DEFINE_ERROR(EmptyTruthRegion);
STICA_DEFINE_ERROR(DimsMismatch);

// files and configuration
STICA_DEFINE_ERROR(IoError);
STICA_DEFINE_ERROR(ConfigError);
STICA_DEFINE_ERROR(StageFailed);

#undef STICA_DEFINE_ERROR

} // namespace stica

#endif
