from .dataset import DatasetError, LabeledDataset, Sample, Source
from .images import crop_roi, decode_image, decode_png, decode_ppm, preprocess, resize_bilinear
from .loaders import (
    GTSRB_TEST_SIZE,
    GTSRB_TRAIN_SIZE,
    load_chinese,
    load_class_folders,
    load_dataset,
    load_gtsrb,
    load_manifest,
)
from .relabel import RelabelMap, remap_labels
from .synthetic import synthetic_dataset
