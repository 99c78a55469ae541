import dataclasses
import shlex
from pathlib import Path

import pytest

from egoforecast.cli import build_parser
from egoforecast.docs import DocsBuildError, build_cards, main, render_docs
from egoforecast.variants import OUT_OF_SCOPE, REFERENCE_ROWS, VARIANTS, get_variant

REPO = Path(__file__).resolve().parents[1]


class TestCards:
    def test_every_published_row_has_exactly_one_card(self):
        cards = build_cards()
        for table, rows in REFERENCE_ROWS.items():
            for row in rows:
                assert sum(c.table == table and c.row == row for c in cards) == 1, row

    def test_out_of_scope_card(self):
        card = next(c for c in build_cards() if c.row == "RNN-P (ORB)")
        assert card.out_of_scope is not None and "unit vector" in card.out_of_scope

    def test_missing_card_fails_build(self):
        without = tuple(v for v in VARIANTS if v.tag != "rnn-ep")
        with pytest.raises(DocsBuildError, match="RNN-EP"):
            render_docs(variants=without)

    def test_missing_out_of_scope_note_fails_build(self):
        with pytest.raises(DocsBuildError, match="ORB"):
            render_docs(out_of_scope={})

    def test_duplicate_mapping_fails_build(self):
        extra = dataclasses.replace(get_variant("rnn"), tag="rnn-copy")
        with pytest.raises(DocsBuildError, match="2 cards"):
            render_docs(variants=VARIANTS + (extra,))

    def test_full_model_has_no_delta(self):
        card = next(c for c in build_cards() if c.tag == "box-rnn-ae")
        assert card.delta == {}
        rnn_p = next(c for c in build_cards() if c.tag == "rnn-p")
        assert rnn_p.delta["prior"] == ("predicted-sampled", "predicted-mean")


class TestRender:
    def test_deterministic(self):
        assert render_docs().pages == render_docs().pages

    def test_committed_docs_are_current(self):
        for name, text in render_docs().pages.items():
            assert (REPO / "docs" / name).read_text() == text, name

    def test_runbook_commands_parse(self):
        runbook = render_docs().pages["runbook.md"]
        parser = build_parser()
        commands = [line for line in runbook.splitlines() if line.startswith("egoforecast ")]
        assert {shlex.split(c)[1] for c in commands} >= {"gen-data", "train-ego", "train-joint", "eval", "sample", "plot"}
        for c in commands:
            parser.parse_args(shlex.split(c)[1:])

    def test_main_writes_tree(self, tmp_path):
        assert main([str(tmp_path / "d")]) == 0
        assert sorted(p.name for p in (tmp_path / "d").iterdir()) == sorted(render_docs().pages)

    def test_out_of_scope_listed_in_surrogates(self):
        text = render_docs().pages["surrogates.md"]
        for row in OUT_OF_SCOPE:
            assert row in text
