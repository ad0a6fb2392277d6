"""Volumetric representation learning: 3D residual VAE, incremental PCA,
downstream heads, and the supporting pipeline kernels."""

from ._voxrep import (
    IncrementalPca,
    LinearModel,
    LstmHead,
    Vae,
    VoxrepError,
    generate_cohort,
    kl_divergence,
    knn_predict,
    load_nifti,
    mae,
    paa,
    pearson,
    r2,
    rescale_and_threshold,
    roc_auc,
    save_nifti,
    train_linear_svm,
    train_linear_svr,
)

__all__ = [
    "IncrementalPca",
    "LinearModel",
    "LstmHead",
    "Vae",
    "VoxrepError",
    "generate_cohort",
    "kl_divergence",
    "knn_predict",
    "load_nifti",
    "mae",
    "paa",
    "pearson",
    "r2",
    "rescale_and_threshold",
    "roc_auc",
    "save_nifti",
    "train_linear_svm",
    "train_linear_svr",
]

__version__ = "0.1.0"
