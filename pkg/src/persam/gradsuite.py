"""Finite-difference check of the full model loss against backprop, per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import numerical_grad, relative_error
from .autodiff import tensor as T
from .data.bags import make_bag
from .data.synth import SynthSpec, generate_case
from .encoder import EncoderConfig
from .model import GROUPS, ModelConfig, PersAM

TOLERANCE = 1e-4


@dataclass
class GradReport:
    group_error: dict[str, float]
    param_error: dict[str, float]
    tolerance: float = TOLERANCE
    offending: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.offending

    def format(self) -> str:
        lines = [f"{g:<4} max rel err {self.group_error[g]:.3e}" for g in self.group_error]
        if self.offending:
            lines.append("FAILED (> %.0e): %s" % (self.tolerance, ", ".join(self.offending)))
        else:
            lines.append(f"all groups below {self.tolerance:.0e}")
        return "\n".join(lines)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(encoder=EncoderConfig.tiny(), clf_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_bag(cfg: ModelConfig, seed: int = 0, label: int = 0):
    enc = cfg.encoder
    spec = SynthSpec(n_cases=1, pool_size=max(enc.L, 10), patch_size=enc.patch_shape[0])
    case = generate_case(label, "typical", seed, spec)
    return make_bag(case, np.arange(enc.L))


def run_gradcheck(cfg: ModelConfig | None = None, seed: int = 0, corrupt: bool = False,
                  h: float = 1e-6, tolerance: float = TOLERANCE) -> GradReport:
    """Compare every parameter's analytic gradient of the bag loss with central differences.

    Dropout is off so the loss is a deterministic function of the parameters.
    ``corrupt`` perturbs the sigmoid backward rule, a negative control that
    must make the check fail.
    """
    cfg = cfg or tiny_config()
    model = PersAM(cfg, seed)
    model.eval()
    bag = tiny_bag(cfg, seed, label=seed % cfg.encoder.C)

    def loss():
        return model.loss(model(bag), bag)

    previous = T._debug["corrupt_sigmoid_grad"]
    T._debug["corrupt_sigmoid_grad"] = corrupt
    try:
        model.zero_grad()
        loss().backward()
    finally:
        T._debug["corrupt_sigmoid_grad"] = previous
    group_error = {g: 0.0 for g in GROUPS}
    param_error = {}
    for name, p, group in model.named_parameters():
        err = relative_error(p.grad, numerical_grad(loss, p, h=h))
        param_error[name] = err
        group_error[group] = max(group_error[group], err)
    offending = [n for n, e in param_error.items() if not e < tolerance]
    return GradReport(group_error, param_error, tolerance, offending)
