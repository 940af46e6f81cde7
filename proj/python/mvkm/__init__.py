from ._core import (
    MvkmError,
    bh_adjust,
    composite_test,
    gaussian_gram,
    ibs_gram,
    kernel_family,
    linear_gram,
    polynomial_gram,
    power_study,
    reml_fit,
    run_screen,
    satterthwaite_pvalue,
    score_tests,
    simulate,
)

__all__ = [
    "MvkmError",
    "bh_adjust",
    "composite_test",
    "gaussian_gram",
    "ibs_gram",
    "kernel_family",
    "linear_gram",
    "polynomial_gram",
    "power_study",
    "reml_fit",
    "run_screen",
    "satterthwaite_pvalue",
    "score_tests",
    "simulate",
]
