import json
import shutil

import pytest

from fxprec.errors import SchemaError
from fxprec.golden import NETWORKS, bundled_dir, load_bundle, verify_bundle, verify_paper

# Cells where the rebuilt configuration disagrees with the printed tables.
# Each has been checked against the printed gains and gradient formats; see
# the project notes for the per-cell arithmetic.
KNOWN = {
    ("cifar10_convnet", 1, "a", 8, 9),
    ("cifar10_convnet", 2, "gw", 9, 8),
    ("cifar10_convnet", 2, "ga", 8, 7),
    ("cifar10_convnet", 8, "ga", 11, 12),
    ("svhn_convnet", 5, "a", 6, 5),
    ("svhn_convnet", 6, "a", 6, 5),
    ("svhn_convnet", 7, "a", 7, 6),
    ("cifar10_resnet", 12, "w", 15, 14),
    ("cifar10_resnet", 12, "acc", 11, 12),
    ("cifar10_resnet", 13, "w", 14, 15),
    ("cifar10_resnet", 13, "acc", 12, 11),
    ("cifar10_resnet", 14, "acc", 13, 12),
    ("cifar10_resnet", 17, "w", 13, 14),
    ("cifar10_resnet", 17, "acc", 15, 13),
    ("cifar10_resnet", 18, "w", 13, 14),
    ("cifar10_resnet", 18, "acc", 15, 13),
    ("cifar10_resnet", 19, "w", 12, 13),
    ("cifar10_resnet", 19, "acc", 18, 15),
    ("cifar10_resnet", 20, "w", 10, 13),
    ("cifar10_resnet", 20, "acc", 16, 15),
    ("cifar10_resnet", 21, "w", 14, 12),
    ("cifar10_resnet", 21, "acc", 12, 18),
    ("cifar10_resnet", 22, "w", 14, 10),
    ("cifar10_resnet", 22, "acc", 13, 16),
}


def cells(verdict):
    return {(c.network, c.layer, c.tensor, c.printed, c.computed) for v in verdict.networks for c in v.mismatches}


class TestBundled:
    def test_all_bundles_ship(self):
        for name in NETWORKS:
            assert (bundled_dir() / f"{name}.json").exists()

    def test_mismatch_set_is_stable(self):
        verdict = verify_paper()
        assert cells(verdict) == KNOWN
        assert not verdict.passed

    def test_whitelisted_accumulator(self):
        v = verify_paper().networks[0]
        assert [(c.layer, c.tensor, c.printed, c.computed) for c in v.whitelisted] == [(2, "acc", 15, 14)]

    def test_one_table_reproduces(self):
        v = {n.network: n for n in verify_paper().networks}["cifar100_resnet"]
        assert v.status == "PASS"
        assert v.cells > 100

    def test_every_row_names_its_source(self):
        for name in NETWORKS:
            doc = load_bundle(bundled_dir() / f"{name}.json")
            for row in doc["expected"]:
                assert "table row" in row["source"]

    def test_report_lists_cells(self):
        text = verify_paper().format()
        assert "MISMATCH  svhn_convnet layer 5 a: printed 6, computed 5" in text
        assert text.rstrip().endswith("overall: FAIL")


class TestCorruption:
    def test_corrupted_gain_is_named(self):
        doc = load_bundle(bundled_dir() / "cifar100_resnet.json")
        doc["stats"]["layers"][2]["e_w"] *= 2.0**8
        v = verify_bundle(doc)
        assert v.status == "FAIL"
        assert {(c.layer, c.tensor) for c in v.mismatches} == {(3, "w"), (3, "acc")}
        w = next(c for c in v.mismatches if c.tensor == "w")
        assert w.computed == w.printed + 4

    def test_partial_directory(self, tmp_path):
        shutil.copy(bundled_dir() / "svhn_convnet.json", tmp_path)
        verdict = verify_paper(tmp_path)
        status = {v.network: v.status for v in verdict.networks}
        assert status["svhn_convnet"] == "FAIL"
        assert [s for n, s in status.items() if n != "svhn_convnet"] == ["ABSENT"] * 3

    def test_absent_only_directory_does_not_pass(self, tmp_path):
        assert not verify_paper(tmp_path).passed

    def test_single_passing_bundle(self, tmp_path):
        shutil.copy(bundled_dir() / "cifar100_resnet.json", tmp_path)
        assert verify_paper(tmp_path).passed

    def test_malformed_bundle(self, tmp_path):
        (tmp_path / "svhn_convnet.json").write_text(json.dumps({"stats": {}}))
        with pytest.raises(SchemaError, match="expected"):
            verify_paper(tmp_path)
