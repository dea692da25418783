"""Vision-to-language connector: a two-layer MLP applied row-wise.

Maps encoder patch features into the language model's embedding space.
This is the only trainable surface during the first training stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import tensor as T
from .tensor import Tensor

WEIGHT_NAMES = ("projector.w1", "projector.b1", "projector.w2", "projector.b2")


@dataclass
class ProjectorWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_weight_map(cls, weights: Mapping[str, Tensor]) -> "ProjectorWeights":
        return cls(weights["projector.w1"], weights["projector.b1"],
                   weights["projector.w2"], weights["projector.b2"])

    def validate(self, v_hidden: int, lm_hidden: int) -> None:
        inner = self.w1.shape[1]
        if self.w1.shape != (v_hidden, inner) or self.b1.shape != (inner,):
            raise T.ShapeError(
                f"projector first layer {self.w1.shape}/{self.b1.shape} does not map "
                f"vision width {v_hidden}")
        if self.w2.shape != (inner, lm_hidden) or self.b2.shape != (lm_hidden,):
            raise T.ShapeError(
                f"projector second layer {self.w2.shape}/{self.b2.shape} does not map "
                f"to decoder width {lm_hidden}")


def project(features: Tensor, w: ProjectorWeights) -> Tensor:
    """gelu(features @ w1 + b1) @ w2 + b2, independently per row."""
    h = T.gelu(T.add(T.matmul(features, w.w1), w.b1))
    return T.add(T.matmul(h, w.w2), w.b2)
