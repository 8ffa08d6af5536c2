from .io import DatasetFormatError, UnsupportedVersionError, load_dataset, save_dataset
from .synth import (
    BagSample,
    Fold,
    InsufficientPatchesError,
    StratificationError,
    SynthSpec,
    SyntheticCase,
    SyntheticDataset,
    generate_case,
    generate_dataset,
    sample_bags,
    split_folds,
)
