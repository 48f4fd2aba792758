#pragma once

#include <stdexcept>
#include <string>

namespace viewalign {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define VIEWALIGN_DEFINE_ERROR(NAME)                \
    struct NAME : Error {                           \
        using Error::Error;                         \
    }

// geometry
VIEWALIGN_DEFINE_ERROR(SingularMatrix);
VIEWALIGN_DEFINE_ERROR(PointAtInfinity);
VIEWALIGN_DEFINE_ERROR(EmptyWindow);
VIEWALIGN_DEFINE_ERROR(AsymmetricAdjacency);

// alignment
VIEWALIGN_DEFINE_ERROR(DimensionMismatch);
VIEWALIGN_DEFINE_ERROR(EmptyCandidateSet);
VIEWALIGN_DEFINE_ERROR(MissingHomography);

// diffusion
VIEWALIGN_DEFINE_ERROR(IndivisibleDimensions);
VIEWALIGN_DEFINE_ERROR(ShapeMismatch);
VIEWALIGN_DEFINE_ERROR(InvalidTimestepPair);
VIEWALIGN_DEFINE_ERROR(NonFiniteLoss);
VIEWALIGN_DEFINE_ERROR(NonFiniteInput);

// memory bank
VIEWALIGN_DEFINE_ERROR(EmptyFeatureSet);
VIEWALIGN_DEFINE_ERROR(LevelMismatch);
VIEWALIGN_DEFINE_ERROR(EmptyMap);
VIEWALIGN_DEFINE_ERROR(EmptyList);
VIEWALIGN_DEFINE_ERROR(CorruptBankFile);

// datasets
VIEWALIGN_DEFINE_ERROR(DefectOutOfBounds);
VIEWALIGN_DEFINE_ERROR(IoFailure);
VIEWALIGN_DEFINE_ERROR(ManifestMissing);
VIEWALIGN_DEFINE_ERROR(MaskLabelMismatch);
VIEWALIGN_DEFINE_ERROR(MissingCalibration);

// evaluation
VIEWALIGN_DEFINE_ERROR(SingleClass);

// cli / config
VIEWALIGN_DEFINE_ERROR(ConfigParseError);
VIEWALIGN_DEFINE_ERROR(MissingInput);

#undef VIEWALIGN_DEFINE_ERROR

}  // namespace viewalign
