"""Generated documentation: variant cards, runbook, surrogate disclosure and
module map.

Everything is rendered from the variant registry, so a row added to the
benchmark shows up here and a published row without a card (or an explicit
out-of-scope note) stops the build.

Run ``python -m egoforecast.docs [out_dir]`` to regenerate ``docs/``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

from .synthdata import DEFAULT_SPLIT_SIZES, EGO_KINDS, FORMAT_VERSION, IMAGE_H, IMAGE_W, TARGET_KINDS
from .training import TrainConfig
from .variants import (
    ORDERING_CLAIMS,
    OUT_OF_SCOPE,
    REFERENCE_ROWS,
    VARIANTS,
    ModelVariant,
    get_variant,
)

# the full model each table's cards are compared against
_FULL_MODEL = {"ego": "rnn-ae", "box": "box-rnn-ae"}
_COMPARED_FIELDS = ("baseline", "uncertainty", "prior", "box_uncertainty")
_TABLE_TITLES = {"ego": "ego-motion table", "box": "box table"}


class DocsBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class VariantCard:
    tag: str
    label: str
    table: str
    row: str | None
    delta: dict[str, tuple[object, object]]
    orderings: tuple[str, ...]
    note: str
    out_of_scope: str | None = None

    def to_markdown(self) -> str:
        head = f"### {self.label}" + (f" (`{self.tag}`)" if self.tag else "")
        lines = [head, ""]
        where = _TABLE_TITLES[self.table]
        if self.out_of_scope is not None:
            lines += [f"- row: {where}, {self.row}", "- status: out of scope", f"- reason: {self.out_of_scope}", ""]
            return "\n".join(lines)
        lines.append(f"- row: {where}, {self.row}" if self.row else "- row: none (diagnostic only)")
        if self.delta:
            full = _FULL_MODEL[self.table]
            parts = [f"{k} {full_v} -> {v}" for k, (full_v, v) in self.delta.items()]
            lines.append(f"- differs from `{full}`: " + "; ".join(parts))
        else:
            lines.append("- the full model of this table")
        lines.append(f"- {self.note}")
        for claim in self.orderings:
            lines.append(f"- expected: {claim}")
        lines.append("")
        return "\n".join(lines)


def card_for(v: ModelVariant) -> VariantCard:
    full = get_variant(_FULL_MODEL[v.table])
    delta = {}
    for name in _COMPARED_FIELDS:
        a, b = getattr(full, name), getattr(v, name)
        if a != b:
            delta[name] = (a, b)
    claims = tuple(c.describe() for c in ORDERING_CLAIMS if v.tag in (c.better, c.worse))
    return VariantCard(v.tag, v.label, v.table, v.row, delta, claims, v.note)


def build_cards(variants=VARIANTS, out_of_scope=OUT_OF_SCOPE, reference_rows=REFERENCE_ROWS) -> list[VariantCard]:
    """One card per variant plus one per out-of-scope row; raises
    :class:`DocsBuildError` when a published row is covered by neither, or by both."""
    cards = [card_for(v) for v in variants]
    problems = []
    for table, rows in reference_rows.items():
        for row in rows:
            built = [c for c in cards if c.table == table and c.row == row]
            skipped = row in out_of_scope
            if len(built) + skipped != 1:
                problems.append(f"{_TABLE_TITLES[table]} row {row!r}: {len(built)} cards, out-of-scope={skipped}")
            if skipped and not built:
                cards.append(VariantCard("", row, table, row, {}, (), "", out_of_scope[row]))
    known = {(t, r) for t, rows in reference_rows.items() for r in rows}
    for c in cards:
        if c.row is not None and (c.table, c.row) not in known:
            problems.append(f"card {c.tag!r} claims unknown row {c.row!r}")
    if problems:
        raise DocsBuildError("unmapped or duplicated rows:\n  " + "\n  ".join(problems))
    order = {(t, r): i for t, rows in reference_rows.items() for i, r in enumerate(rows)}
    return sorted(cards, key=lambda c: (c.table != "ego", order.get((c.table, c.row), len(order))))


# ---------------------------------------------------------------- pages

MODULE_MAP = (
    ("aleatoric loss: bivariate Gaussian negative log-likelihood with log-sigma heads", "uncertainty"),
    ("epistemic spread from Monte-Carlo dropout passes", "neural, uncertainty"),
    ("fusion of aleatoric and epistemic variance", "uncertainty"),
    ("two-stream recurrent architecture, 5-value ego head, 10-value box head, prior conditioning", "egomotion, locnet"),
    ("dead reckoning of positions from velocity and yaw rate", "egomotion"),
    ("optimizer, learning-rate schedules, loss weights, normalization", "training"),
    ("observation and horizon lengths, best-of-k ADE/FDE/FIOU, baseline matrix, mode sampling", "evalkit, variants"),
    ("synthetic scenes, projection and dataset files", "synthdata, windows"),
    ("reverse-mode automatic differentiation on float64 arrays", "ndtensor"),
    ("command line, artifacts and plots", "cli, pipeline, plots"),
)


def render_index() -> str:
    lines = [
        "# egoforecast documentation",
        "",
        "Generated by `python -m egoforecast.docs`; do not edit by hand.",
        "",
        "- [runbook.md](runbook.md): commands that rebuild every acceptance artifact",
        "- [variants.md](variants.md): one card per results row",
        "- [surrogates.md](surrogates.md): where the synthetic setup departs from real recordings",
        "",
        "## Module map",
        "",
        "| component | module |",
        "|---|---|",
    ]
    lines += [f"| {what} | `{mod}` |" for what, mod in MODULE_MAP]
    return "\n".join(lines) + "\n"


def render_variants(cards: list[VariantCard]) -> str:
    lines = ["# Variant cards", ""]
    for table in ("ego", "box"):
        lines += [f"## {_TABLE_TITLES[table].capitalize()}", ""]
        lines += [c.to_markdown() for c in cards if c.table == table]
    return "\n".join(lines).rstrip() + "\n"


def render_runbook() -> str:
    cfg = TrainConfig()
    sizes = ", ".join(f"{k} {v}" for k, v in DEFAULT_SPLIT_SIZES.items())
    return f"""# Runbook

All commands write under `--out` (default `$EGOFORECAST_OUT` or `./runs`).
Pass the same `--seed` to every command of a run.

## Full reference run

```sh
egoforecast gen-data    --out runs/s0 --seed 0
egoforecast train-ego   --out runs/s0 --seed 0 --jobs 4
egoforecast train-joint --out runs/s0 --seed 0 --jobs 4
egoforecast eval        --out runs/s0 --seed 0 eval.group_by=ego_kind
egoforecast sample      --out runs/s0 --seed 0 --scene test-0003 --variant box-rnn-ae
egoforecast plot        --out runs/s0 --scene test-0003 --variant box-rnn-ae
```

- `gen-data` writes `data/{{train,val,test}}.jsonl` ({sizes} scenes).
- `train-ego` trains every ego stream the selected variants need
  ({cfg.ego_epochs} epochs, learning rate {cfg.lr} halved every {cfg.lr_period} epochs).
- `train-joint` trains the box-table models on top of those checkpoints
  ({cfg.joint_epochs} epochs, learning rate divided by {cfg.loc_lr_factor:g} every {cfg.lr_period} epochs).
- `eval` writes `reports/report.txt` and `reports/report.tsv`.
- `sample` and `plot` write `samples/<scene>--<tag>.json` and `plots/<scene>--<tag>.svg`.
- Every command leaves `config.<command>.json` and refreshes `MANIFEST.sha256`.

Repeat with `--seed 1` and `--seed 2` for the three-seed ordering check.

## Acceptance suite

```sh
pytest tests/test_acceptance.py -s
```

Prints one PASS/FAIL line per criterion. The ordering criterion trains the
variants it needs for three seeds, so it takes several minutes on one core.

## Determinism check

```sh
egoforecast gen-data --out runs/a --seed 7 data.train=40 data.val=10 data.test=10
egoforecast gen-data --out runs/b --seed 7 data.train=40 data.val=10 data.test=10
cmp runs/a/MANIFEST.sha256 runs/b/MANIFEST.sha256
```
"""


def render_surrogates() -> str:
    return f"""# Surrogates and disclosures

## Box-motion flow feature

The flow stream is fed the box's own frame-to-frame motion
`(dcx, dcy, dw, dh)` in place of optical flow pooled inside the box. There is
no imagery in the synthetic scenes to compute flow from. The architecture is
unchanged: a second recurrent encoder reads this sequence and its final state
is concatenated with the box encoder's.

## Synthetic scenes

- Ego kinds: {", ".join(EGO_KINDS)}.
- Target kinds: {", ".join(TARGET_KINDS)}.
- Image size {IMAGE_W}x{IMAGE_H} px, 0.1 s ticks, 10 observed and 20 forecast ticks.
- Odometry noise is white; box noise is AR(1) per coordinate.
- Metrics use the noise-free boxes and the dead-reckoned noise-free ego track.

## Dataset file format (version {FORMAT_VERSION})

Line-delimited JSON. The first line is a header with `format`, `version`,
`dt`, `image_size`, `camera` and `units`. Each following line is one scene
with fields `scene_id`, `ego_kind`, `target_kind`, `seed`, `odom_clean`,
`odom` (v m/s, yaw rate rad/s), `ego_xy` (m), `ego_yaw` (rad), `target_xy`
(m), `target_size` (m), `boxes_clean`, `boxes` (normalized cx, cy, w, h;
`null` when not visible), `flow` and `visible`.

## Rows not built

""" + "\n".join(f"- {row}: {why}" for row, why in OUT_OF_SCOPE.items()) + "\n"


@dataclass
class DocsTree:
    pages: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.pages):
            p = out / name
            p.write_text(self.pages[name])
            written.append(p)
        return written


def render_docs(variants=VARIANTS, out_of_scope=OUT_OF_SCOPE, reference_rows=REFERENCE_ROWS) -> DocsTree:
    cards = build_cards(variants, out_of_scope, reference_rows)
    return DocsTree({
        "index.md": render_index(),
        "runbook.md": render_runbook(),
        "variants.md": render_variants(cards),
        "surrogates.md": render_surrogates(),
    })


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else Path("docs")
    try:
        paths = render_docs().write(out)
    except DocsBuildError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
