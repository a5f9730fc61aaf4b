"""Independent Monte-Carlo and resampling oracles for the importance predictions."""

from pathscape.verify.checks import (
    MCField, VerificationReport, batchnorm_prediction_check, bn_weight_scale_invariance, gradient_importance,
    lemma1_check, logit_function, mc_importance_over_inits, permutation_importance, path_sum_check, relu_check,
    topk_ablation,
)

__all__ = [
    "MCField", "VerificationReport", "batchnorm_prediction_check", "bn_weight_scale_invariance", "gradient_importance",
    "lemma1_check", "logit_function", "mc_importance_over_inits", "permutation_importance", "path_sum_check",
    "relu_check", "topk_ablation",
]
