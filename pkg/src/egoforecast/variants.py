"""Registry of every evaluated model variant and baseline.

One entry per row of the ego-motion table and the box table. The benchmark,
the trainer and the generated docs all read this registry, so the three cannot
disagree about which rows exist.
"""

from __future__ import annotations

from dataclasses import dataclass

UNCERTAINTY_MODES = ("none", "A", "E", "AE")
PRIOR_SOURCES = ("none", "ground-truth", "predicted-mean", "predicted-sampled")
TABLES = ("ego", "box")


@dataclass(frozen=True)
class ModelVariant:
    """``ego_source`` names the ego-table variant whose checkpoint seeds (or is)
    this model's ego stream; ``None`` for baselines and prior-free models."""

    tag: str
    label: str
    table: str
    uncertainty: str = "none"
    prior: str = "none"
    baseline: str | None = None
    ego_source: str | None = None
    box_uncertainty: str = "none"
    reference: bool = True
    note: str = ""
    # published row name when it differs from ``label``
    row_name: str | None = None

    def __post_init__(self):
        if self.table not in TABLES:
            raise ValueError(f"unknown table {self.table!r}")
        if self.uncertainty not in UNCERTAINTY_MODES or self.box_uncertainty not in UNCERTAINTY_MODES:
            raise ValueError(f"{self.tag}: unknown uncertainty mode")
        if self.prior not in PRIOR_SOURCES:
            raise ValueError(f"{self.tag}: unknown prior source {self.prior!r}")

    @property
    def row(self) -> str | None:
        """Name of the published results row this variant stands for."""
        if not self.reference:
            return None
        return self.row_name or self.label

    @property
    def is_baseline(self) -> bool:
        return self.baseline is not None

    @property
    def needs_ego_checkpoint(self) -> bool:
        return not self.is_baseline and (self.table == "ego" or self.prior in ("predicted-mean", "predicted-sampled"))

    @property
    def needs_joint_checkpoint(self) -> bool:
        return self.table == "box" and not self.is_baseline

    @property
    def stochastic(self) -> bool:
        """Whether evaluation draws k samples (otherwise k is reported as 1)."""
        if self.is_baseline:
            return False
        if self.table == "ego":
            return self.uncertainty != "none"
        return self.prior == "predicted-sampled" or self.box_uncertainty != "none"


VARIANTS: tuple[ModelVariant, ...] = (
    # ego-motion table
    ModelVariant("const-vel", "Const-Vel", "ego", baseline="const-vel",
                 note="repeats the last observed velocity and yaw rate"),
    ModelVariant("rnn", "RNN", "ego", "none", ego_source="rnn", note="deterministic GRU trained with squared error"),
    ModelVariant("rnn-e", "RNN-E", "ego", "E", ego_source="rnn-e", note="MC-dropout spread only"),
    ModelVariant("rnn-a", "RNN-A", "ego", "A", ego_source="rnn-a", note="predicted aleatoric variance only"),
    ModelVariant("rnn-ae", "RNN-AE", "ego", "AE", ego_source="rnn-ae", note="aleatoric and MC-dropout fused"),
    # box table
    ModelVariant("box-const-vel", "Const-Vel (w/o scaling)", "box", baseline="const-vel",
                 note="box centre extrapolated, size frozen"),
    ModelVariant("box-const-vel-scaling", "Const-Vel (w/ scaling)", "box", baseline="const-vel-scaling",
                 note="box centre and size extrapolated"),
    ModelVariant("rnn-np", "RNN-NP", "box", prior="none", note="no ego-motion prior"),
    ModelVariant("rnn-p", "RNN-P", "box", "none", "predicted-mean", ego_source="rnn",
                 note="deterministic predicted ego-motion prior", row_name="RNN-P (IMU)"),
    ModelVariant("rnn-ap", "RNN-AP", "box", "A", "predicted-sampled", ego_source="rnn-a",
                 note="ego modes from aleatoric uncertainty, deterministic boxes"),
    ModelVariant("rnn-ep", "RNN-EP", "box", "E", "predicted-sampled", ego_source="rnn-e",
                 note="ego modes from MC dropout, deterministic boxes"),
    ModelVariant("box-rnn-a", "RNN-A", "box", "A", "predicted-sampled", ego_source="rnn-a", box_uncertainty="A",
                 note="aleatoric uncertainty in both streams"),
    ModelVariant("box-rnn-e", "RNN-E", "box", "E", "predicted-sampled", ego_source="rnn-e", box_uncertainty="E",
                 note="MC-dropout uncertainty in both streams"),
    ModelVariant("box-rnn-ae", "RNN-AE", "box", "AE", "predicted-sampled", ego_source="rnn-ae", box_uncertainty="AE",
                 note="fused uncertainty in both streams"),
    # diagnostic, not a reference row
    ModelVariant("rnn-gtp", "RNN-GTP (diagnostic)", "box", prior="ground-truth", reference=False,
                 note="future odometry handed to the box decoder; an upper bound, not a forecaster"),
)

# Every row of the published ego-motion and box tables, in order.
REFERENCE_ROWS: dict[str, tuple[str, ...]] = {
    "ego": ("Const-Vel", "RNN", "RNN-E", "RNN-A", "RNN-AE"),
    "box": (
        "Const-Vel (w/o scaling)", "Const-Vel (w/ scaling)", "RNN-NP", "RNN-P (ORB)", "RNN-P (IMU)",
        "RNN-AP", "RNN-EP", "RNN-A", "RNN-E", "RNN-AE",
    ),
}


@dataclass(frozen=True)
class OrderingClaim:
    """``better`` should beat ``worse`` on ``metric`` (lower ADE/FDE, higher
    FIOU) over the scenes in ``group``; ``allow_tie`` accepts equality."""

    better: str
    worse: str
    metric: str
    group: str = "all"
    allow_tie: bool = False

    def holds(self, better_value: float, worse_value: float) -> bool:
        if self.metric == "FIOU":
            return better_value > worse_value or (self.allow_tie and better_value == worse_value)
        return better_value < worse_value or (self.allow_tie and better_value == worse_value)

    def describe(self) -> str:
        rel = "matches or beats" if self.allow_tie else "beats"
        return f"{self.better} {rel} {self.worse} on {self.metric} ({self.group} scenes)"


# Qualitative orderings the synthetic benchmark is expected to reproduce.
ORDERING_CLAIMS: tuple[OrderingClaim, ...] = (
    OrderingClaim("rnn", "const-vel", "ADE", "turn"),
    OrderingClaim("rnn", "const-vel", "FDE", "turn"),
    OrderingClaim("rnn-ae", "rnn", "ADE", allow_tie=True),
    OrderingClaim("rnn-p", "rnn-np", "FIOU"),
    OrderingClaim("box-rnn-ae", "rnn-p", "ADE"),
    OrderingClaim("box-rnn-ae", "rnn-p", "FDE"),
    OrderingClaim("box-rnn-ae", "rnn-p", "FIOU"),
    OrderingClaim("box-const-vel-scaling", "box-const-vel", "FIOU"),
)

# Reference rows that are deliberately not built, with the reason.
OUT_OF_SCOPE: dict[str, str] = {
    "RNN-P (ORB)": (
        "needs visual SLAM odometry from real video; monocular SLAM only recovers translation "
        "as a normalized unit vector, so its scale would have to be borrowed from elsewhere. "
        "The synthetic benchmark has no images to run SLAM on."
    ),
}

# Published numbers on the original real-world dataset, printed as report
# footnotes for context only. They are not expected to be reproduced.
REFERENCE_NUMBERS: dict[tuple[str, str], dict[str, float]] = {
    ("ego", "const-vel"): {"ADE": 0.3089, "FDE": 0.8386},
    ("ego", "rnn-ae"): {"ADE": 0.1324, "FDE": 0.3031},
    ("box", "box-rnn-ae"): {"ADE": 49.02, "FDE": 100.26, "FIOU": 0.5194},
}

_BY_TAG = {v.tag: v for v in VARIANTS}


def get_variant(tag: str) -> ModelVariant:
    try:
        return _BY_TAG[tag]
    except KeyError:
        raise KeyError(f"unknown variant {tag!r}; known: {', '.join(_BY_TAG)}") from None


def parse_variants(selection: str | list[str] | None) -> list[ModelVariant]:
    """Comma-separated tags (or ``"all"`` / ``"reference"``) to registry entries, in registry order."""
    if selection is None or selection == "all":
        return list(VARIANTS)
    if selection == "reference":
        return [v for v in VARIANTS if v.reference]
    tags = selection.split(",") if isinstance(selection, str) else list(selection)
    tags = [t.strip() for t in tags if t.strip()]
    chosen = {get_variant(t).tag for t in tags}
    return [v for v in VARIANTS if v.tag in chosen]


def ego_checkpoints_needed(variants: list[ModelVariant]) -> list[str]:
    need = {v.ego_source for v in variants if v.needs_ego_checkpoint and v.ego_source}
    return [v.tag for v in VARIANTS if v.tag in need]
