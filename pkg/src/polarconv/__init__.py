"""Norm-angle factored convolution operators and a desk-scale training,
gradient-verification, and adversarial-robustness harness."""

from .operators import (AngularKind, AngleDecomposition, ConvGeometry,
                        DecoupledConvLayer, MagnitudeKind, OperatorSpec,
                        WeightingMode, angular, decompose, magnitude,
                        relu_decoupled_equivalence)
from .network import (ArchitectureDescription, Network, RegularizerKind,
                      RegularizerSpec, build_from_config, orthogonality_penalty,
                      softmax_xent)
from .optimizers import (GradientMode, Optimizer, OptimizerKind,
                         ProjectionSchedule, UpdateRule,
                         apply_weighted_gradients, project_weights)
from .tensor import PatchMatrix, col2im_grad, im2col, row_norms

__version__ = "0.1.0"

__all__ = [
    "AngleDecomposition", "AngularKind", "ArchitectureDescription",
    "ConvGeometry", "DecoupledConvLayer", "GradientMode", "MagnitudeKind",
    "Network", "OperatorSpec", "Optimizer", "OptimizerKind", "PatchMatrix",
    "ProjectionSchedule", "RegularizerKind", "RegularizerSpec", "UpdateRule",
    "WeightingMode", "angular", "apply_weighted_gradients", "build_from_config",
    "col2im_grad", "decompose", "im2col", "magnitude", "orthogonality_penalty",
    "project_weights", "relu_decoupled_equivalence", "row_norms", "softmax_xent",
]
