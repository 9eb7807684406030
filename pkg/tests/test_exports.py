import csv
import json
import math

import numpy as np
import pytest
from PIL import Image

import oracles
from fluoroformer import numerics as nx
from fluoroformer.checkpoint import Checkpoint
from fluoroformer.exports import export_interpretability, heatmap_to_uint8, write_grid_csv
from fluoroformer.fusion import EmbeddedBag
from fluoroformer.metrics import HeatmapGrid
from fluoroformer.model import MILModel
from fluoroformer.synth import synth_cohort
from fluoroformer.trainer import TrainConfig


def _read_grid(path):
    with path.open() as fh:
        return [[None if v == "" else float(v) for v in row] for row in csv.reader(fh)]


def _model(seed=0, d_emb=8):
    with nx.precision("float64"):
        return MILModel(d_emb, 4, 4, seed=seed)


@pytest.fixture(scope="module")
def fixture_export(tmp_path_factory):
    cohort = synth_cohort(20, M=3, d_emb=8, seed=5, grid=4)
    bags = cohort.bags[:6]
    model = _model(seed=7)
    out = tmp_path_factory.mktemp("export")
    report = export_interpretability(model, bags, out)
    return model, bags, out, report


class TestExport:
    def test_empty_bag_list(self, tmp_path):
        report = export_interpretability(_model(), [], tmp_path)
        assert report == {"n_slides": 0, "slides": [], "marker_attention": None}
        assert json.loads((tmp_path / "report.json").read_text()) == report
        assert not (tmp_path / "attention").exists()

    def test_single_patch_slide(self, tmp_path):
        with nx.precision("float64"):
            bag = EmbeddedBag(nx.tensor(np.random.default_rng(0).standard_normal((1, 2, 8))), [[0, 0]], "one")
        report = export_interpretability(_model(), [bag], tmp_path)
        assert _read_grid(tmp_path / "attention" / "one.csv") == [[1.0]]
        assert len(_read_grid(tmp_path / "argmax" / "one.csv")) == 1
        assert np.asarray(Image.open(tmp_path / "attention" / "one.png")).shape == (1, 1)
        assert report["slides"][0]["morans_i"] is None

    def test_attention_grids_match_oracle(self, fixture_export):
        model, bags, out, _ = fixture_export
        for bag in bags:
            H_hat, A = oracles.fuse(bag.H.data, model.fusion)
            a = oracles.gated_attention(H_hat, model.attention)
            grid = _read_grid(out / "attention" / f"{bag.sample_id}.csv")
            occupied = {(int(r), int(c)) for r, c in bag.coords}
            for k, (r, c) in enumerate(bag.coords):
                assert abs(grid[r][c] - a[k]) < 1e-12
            for r, row in enumerate(grid):
                for c, v in enumerate(row):
                    assert (v is None) == ((r, c) not in occupied)
            labels = _read_grid(out / "argmax" / f"{bag.sample_id}.csv")
            for k, (r, c) in enumerate(bag.coords):
                cols = [sum(A[k][i][j] for i in range(A.shape[1])) for j in range(A.shape[2])]
                assert labels[r][c] == cols.index(max(cols))

    def test_marker_attention_matches_oracle(self, fixture_export):
        model, bags, out, report = fixture_export
        per_slide = []
        for bag in bags:
            H_hat, A = oracles.fuse(bag.H.data, model.fusion)
            a = oracles.gated_attention(H_hat, model.attention)
            n = math.ceil(0.1 * len(a))
            top = sorted(range(len(a)), key=lambda k: -a[k])[:n]
            per_slide.append(sum(A[k] for k in top) / n)
        raw = sum(per_slide) / len(per_slide)
        z = (raw - raw.mean()) / raw.std()
        np.testing.assert_allclose(report["marker_attention"]["raw"], raw, rtol=0, atol=1e-12)
        np.testing.assert_allclose(report["marker_attention"]["zscored"], z, rtol=0, atol=1e-9)
        with (out / "marker_attention_z.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0][1:] == list(bags[0].channel_names)
        np.testing.assert_allclose([[float(v) for v in r[1:]] for r in rows[1:]], z, rtol=0, atol=1e-9)

    def test_morans_i_matches_oracle(self, fixture_export):
        model, bags, out, report = fixture_export
        with (out / "morans_i.csv").open() as fh:
            recorded = {r["sample_id"]: r["morans_i"] for r in csv.DictReader(fh)}
        for bag, slide in zip(bags, report["slides"]):
            H_hat, _ = oracles.fuse(bag.H.data, model.fusion)
            grid = HeatmapGrid.from_patches(oracles.gated_attention(H_hat, model.attention), bag.coords)
            expected = oracles.morans_i(grid.values, grid.mask)
            assert abs(slide["morans_i"] - expected) < 1e-10
            assert abs(float(recorded[bag.sample_id]) - expected) < 1e-10

    def test_from_checkpoint_same_files(self, fixture_export, tmp_path):
        model, bags, out, _ = fixture_export
        ckpt = Checkpoint(model.state_dict(), {"config": TrainConfig(d_hid=4, d_att=4, precision="float64")
                                               .to_dict(), "d_emb": 8})
        export_interpretability(ckpt, bags, tmp_path)
        for name in ("marker_attention.csv", "morans_i.csv", f"attention/{bags[0].sample_id}.csv"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_png_scaling(self):
        grid = HeatmapGrid(np.array([[0.1, 0.3], [0.2, 9.0]]), np.array([[True, True], [True, False]]))
        np.testing.assert_array_equal(heatmap_to_uint8(grid), [[1, 255], [128, 0]])

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            export_interpretability(_model(), synth_cohort(20, M=2, d_emb=8, grid=3).bags[:1], blocker / "sub")

    def test_grid_csv_integer_labels(self, tmp_path):
        write_grid_csv(tmp_path / "g.csv", np.array([[2, -1]]), np.array([[True, False]]))
        assert (tmp_path / "g.csv").read_text() == "2,\n"
