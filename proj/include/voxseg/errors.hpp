#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define VOXSEG_DEFINE_ERROR(Name)                                              \
    struct Name : Error {                                                      \
        using Error::Error;                                                    \
    }

// volume / I/O
VOXSEG_DEFINE_ERROR(OutOfBounds);
VOXSEG_DEFINE_ERROR(BadMagic);
VOXSEG_DEFINE_ERROR(UnsupportedVersion);
VOXSEG_DEFINE_ERROR(UnsupportedDtype);
VOXSEG_DEFINE_ERROR(TruncatedFile);
VOXSEG_DEFINE_ERROR(NonFiniteData);
VOXSEG_DEFINE_ERROR(IOFailure);

// ops / models
VOXSEG_DEFINE_ERROR(ShapeMismatch);
VOXSEG_DEFINE_ERROR(InvalidConfig);
VOXSEG_DEFINE_ERROR(InvalidProbability);
VOXSEG_DEFINE_ERROR(NonDivisibleDims);
VOXSEG_DEFINE_ERROR(InvalidVariant);

// sampling / stitching
VOXSEG_DEFINE_ERROR(SubvolumeTooLarge);
VOXSEG_DEFINE_ERROR(PlanMismatch);
VOXSEG_DEFINE_ERROR(EmptyAccumulator);

// metrics / training
VOXSEG_DEFINE_ERROR(UndefinedMetric);
VOXSEG_DEFINE_ERROR(ClassOutOfRange);
VOXSEG_DEFINE_ERROR(NonFiniteLoss);

// configuration
VOXSEG_DEFINE_ERROR(ConfigError);

#undef VOXSEG_DEFINE_ERROR

}  // namespace voxseg
