"""Experiment plan shared by every role after negotiation."""

from __future__ import annotations

from dataclasses import dataclass, field

from .dp import DpParams


@dataclass(frozen=True)
class EmbedConfig:
    bits: int = 512  # watermark length B
    lam: float = 0.02  # regularizer weight
    eta_goal: float = 0.99
    max_rounds: int = 200
    embed_lr: float = 0.05
    selected: int | None = None  # M; defaults to 4*B

    def __post_init__(self):
        if not 0 < self.eta_goal <= 1:
            raise ValueError("eta_goal must lie in (0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.bits < 1:
            raise ValueError("watermark length must be positive")
        if self.M < self.bits:
            raise ValueError("need at least as many selected weights as watermark bits")

    @property
    def M(self) -> int:
        return 4 * self.bits if self.selected is None else int(self.selected)


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    labelmap: int = 1
    augment: int = 2
    client: int = 3
    noise: int = 4
    trainers: int = 5
    batches: int = 6
    nonces: int = 7
    attack: int = 8


@dataclass(frozen=True)
class ExperimentPlan:
    """Topology, hyperparameters and seeds.

    ``client_widths`` describes the data client's encoder and
    ``trainer_widths[i]`` the layer boundaries of trainer ``i+1``; the last
    trainer's final width must equal the number of pseudo classes.
    """

    client_widths: tuple = (64, 16)
    trainer_widths: tuple = ((16, 64, 16), (16, 64, 16), (16, 128, 8))
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    dp: DpParams = field(default_factory=lambda: DpParams(5.0, 1.0))
    q: int = 4
    g: tuple = (2, 2, 2, 2)
    wm: EmbedConfig = field(default_factory=EmbedConfig)
    seeds: Seeds = field(default_factory=Seeds)
    client_pretrain_epochs: int = 10
    augment_sigma: float = 0.05
    early_stop: bool = False
    identities: tuple | None = None

    @property
    def n(self) -> int:
        return len(self.trainer_widths)

    @property
    def n_pseudo(self) -> int:
        return sum(self.g)

    @property
    def gamma(self) -> float:
        return sum(self.g) / self.q

    def identity(self, i: int) -> bytes:
        """Identity bytes of trainer ``i`` (1-based)."""
        if self.identities is not None:
            ident = self.identities[i - 1]
            return ident.encode() if isinstance(ident, str) else bytes(ident)
        return f"trainer-{i}".encode()
