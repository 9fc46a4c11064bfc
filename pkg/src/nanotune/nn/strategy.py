"""Update strategies: which (layer, role) parameters are trainable."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .arch import BatchNorm, TRAINABLE_ROLES, ArchDescriptor


@dataclass(frozen=True)
class UpdateStrategy:
    """A predicate over ``(layer index, role)``.

    ``roles`` picks parameter roles; ``layers`` optionally restricts to a set of
    layer indices (``None`` means every layer). Strategies combine with ``|``,
    e.g. ``BIAS_ONLY | FC_WB``.
    """

    name: str
    roles: frozenset[str]
    layers: Optional[frozenset[int]] = None
    extra: tuple[UpdateStrategy, ...] = ()

    def __post_init__(self) -> None:
        unknown = set(self.roles) - TRAINABLE_ROLES
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}")

    def selects(self, layer: int, role: str) -> bool:
        if role in self.roles and (self.layers is None or layer in self.layers):
            return True
        return any(s.selects(layer, role) for s in self.extra)

    def __or__(self, other: UpdateStrategy) -> UpdateStrategy:
        return UpdateStrategy(
            name=f"{self.name} + {other.name}",
            roles=frozenset(),
            extra=(self, other),
        )

    def selected_keys(self, arch: ArchDescriptor) -> list[tuple[int, str]]:
        return [k for k in arch.param_shapes() if k[1] in TRAINABLE_ROLES and self.selects(*k)]

    def bn_uses_batch_stats(self, arch: ArchDescriptor) -> bool:
        """Default normalisation mode while training under this strategy.

        Batch statistics are used when any batch-norm scale is trained. Otherwise
        batch norm runs on frozen running statistics, which turns it into a
        per-channel affine map whose backward pass needs no retained input.
        """
        return any(
            self.selects(i, "bn_gamma")
            for i, layer in enumerate(arch.layers)
            if isinstance(layer, BatchNorm)
        )


ALL_WB = UpdateStrategy(
    "all (w+b)",
    frozenset({"conv_weight", "conv_bias", "bn_gamma", "bn_beta", "fc_weight", "fc_bias"}),
)
FC_WB = UpdateStrategy("fc (w+b)", frozenset({"fc_weight", "fc_bias"}))
BN_WB = UpdateStrategy("bn (w+b)", frozenset({"bn_gamma", "bn_beta"}))
BIAS_ONLY = UpdateStrategy("all (b)", frozenset({"conv_bias", "bn_beta", "fc_bias"}))

PRESETS = {"AllWB": ALL_WB, "FcWB": FC_WB, "BnWB": BN_WB, "BiasOnly": BIAS_ONLY}


def strategy_from_name(name: str) -> UpdateStrategy:
    """Resolve ``"AllWB"`` or a ``+``-joined combination like ``"BiasOnly+FcWB"``."""
    parts = [p.strip() for p in name.split("+")]
    try:
        strategies = [PRESETS[p] for p in parts]
    except KeyError as exc:
        raise ValueError(f"unknown strategy {exc.args[0]!r}; choose from {sorted(PRESETS)}") from None
    out = strategies[0]
    for s in strategies[1:]:
        out = out | s
    return out


def count_selected_params(arch: ArchDescriptor, strategy: UpdateStrategy) -> int:
    shapes = arch.param_shapes()
    total = 0
    for key in strategy.selected_keys(arch):
        n = 1
        for d in shapes[key]:
            n *= d
        total += n
    return total
