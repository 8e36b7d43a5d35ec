import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtransfer import harness
from advtransfer.errors import GridCellError, InvalidArgument
from advtransfer.geometry import Family
from advtransfer.harness import (
    AccuracyGrid,
    AttackSpec,
    CalibrationReport,
    DataSpec,
    DefenseSpec,
    GridSpec,
    attack_strength,
    base_ladder,
    calibrate_range,
    column_label,
    defense_key,
    dump_gallery,
    family_columns,
    ordering,
    parse_label,
    run_grid,
    slice_grid,
    trained_model,
    truncated_view,
    write_grid_outputs,
)
from advtransfer.io import read_ppm
from advtransfer.model import TrainSchedule, accuracy

TINY_SCHEDULE = TrainSchedule(epochs=3, batch_size=16, warmup_epochs=1, decay_epochs=(2,))


def tiny_spec(**kw):
    base = dict(
        defenses=[DefenseSpec(), DefenseSpec("linf", 8.0)],
        attacks=[AttackSpec("linf", (0.0, 2.0, 8.0)), AttackSpec("l2", (0.0, 100.0))],
        train_data=DataSpec(classes=3, per_class=12, size=16, seed=3),
        eval_data=DataSpec(classes=3, per_class=6, size=16, seed=4),
        schedule=TINY_SCHEDULE,
    )
    base.update(kw)
    return GridSpec(**base)


class TestSpecs:
    def test_labels(self):
        assert column_label("l2", 150.0) == "l2@150"
        assert column_label(Family.JPEG, 0.0625) == "jpeg@0.0625"
        assert parse_label("elastic@0.25") == (Family.ELASTIC, 0.25)
        assert parse_label("clean") == (None, 0.0)
        assert DefenseSpec().label == "clean"
        assert DefenseSpec("l1", 3000).label == "l1@3000"

    def test_ladder_validation(self):
        with pytest.raises(InvalidArgument):
            AttackSpec("linf", ())
        with pytest.raises(InvalidArgument):
            AttackSpec("linf", (2.0, 1.0))
        with pytest.raises(InvalidArgument):
            AttackSpec("linf", (-1.0, 1.0))
        with pytest.raises(ValueError):
            AttackSpec("l3", (1.0,))

    def test_duplicates_rejected(self):
        with pytest.raises(InvalidArgument):
            tiny_spec(defenses=[DefenseSpec(), DefenseSpec()])
        with pytest.raises(InvalidArgument):
            tiny_spec(attacks=[AttackSpec("linf", (1.0,)), AttackSpec("linf", (1.0, 2.0))])

    def test_manifest_round_trip(self):
        spec = tiny_spec(model_seed=5, eval_seed=9, quality=50)
        manifest = json.loads(json.dumps(spec.manifest()))
        again = GridSpec.from_manifest(manifest)
        assert again.to_dict() == spec.to_dict()
        assert manifest["columns"] == spec.column_labels
        assert manifest["rows"] == ["clean", "linf@8"]
        assert manifest["steps"]["linf"]["eval"] > manifest["steps"]["linf"]["train"]
        assert manifest["jpeg"]["luma"][0][0] == 16  # quality 50 is the unscaled table

    def test_base_ladders(self):
        assert base_ladder("linf") == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
        assert len(base_ladder("elastic")) == 6


class TestAccuracyGrid:
    def test_range_checked(self):
        with pytest.raises(InvalidArgument):
            AccuracyGrid(["a"], ["x"], [[1.5]])
        with pytest.raises(InvalidArgument):
            AccuracyGrid(["a"], ["x", "y"], [[0.5]])

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 4).flatmap(
            lambda r: st.integers(1, 5).flatmap(
                lambda c: st.lists(
                    st.lists(st.floats(0, 1), min_size=c, max_size=c), min_size=r, max_size=r
                )
            )
        )
    )
    def test_csv_round_trip(self, values):
        rows = [f"r{i}" for i in range(len(values))]
        cols = [f"linf@{j}" for j in range(len(values[0]))]
        grid = AccuracyGrid(rows, cols, values)
        assert AccuracyGrid.from_csv(grid.to_csv()) == grid
        assert AccuracyGrid.from_csv(grid.to_csv()).to_csv() == grid.to_csv()

    def test_csv_layout(self):
        grid = AccuracyGrid(["clean"], ["linf@1", "linf@2"], [[1.0, 0.25]])
        assert grid.to_csv() == "model,linf@1,linf@2\nclean,1.000000,0.250000\n"


def handmade_grid():
    # l1 looks weaker overall, but its top rungs beat the bottom rungs of linf
    rows = ["clean", "linf@8", "l1@400"]
    cols = ["linf@1", "linf@2", "linf@4", "linf@8", "l1@50", "l1@100", "l1@200", "l1@400"]
    values = [
        [0.95, 0.80, 0.40, 0.05, 1.00, 1.00, 0.90, 0.30],
        [1.00, 0.95, 0.90, 0.70, 1.00, 0.95, 0.85, 0.50],
        [0.90, 0.70, 0.30, 0.05, 1.00, 1.00, 0.95, 0.80],
    ]
    return AccuracyGrid(rows, cols, values)


class TestSlicing:
    def test_labels_and_predicates(self):
        grid = handmade_grid()
        sub = slice_grid(grid, rows=["l1@400", "clean"], columns=lambda c: c.startswith("l1"))
        assert sub.rows == ["clean", "l1@400"]  # original order kept
        assert sub.columns == family_columns(grid, "l1")
        assert sub.value("l1@400", "l1@400") == 0.8

    def test_errors(self):
        grid = handmade_grid()
        with pytest.raises(InvalidArgument):
            slice_grid(grid, rows=["nope"])
        with pytest.raises(InvalidArgument):
            slice_grid(grid, columns=lambda c: False)

    @settings(max_examples=40, deadline=None)
    @given(st.data())
    def test_slice_of_slice(self, data):
        grid = handmade_grid()
        cols1 = data.draw(st.lists(st.sampled_from(grid.columns), min_size=1, unique=True))
        cols2 = data.draw(st.lists(st.sampled_from(cols1), min_size=1, unique=True))
        assert slice_grid(slice_grid(grid, columns=cols1), columns=cols2) == slice_grid(grid, columns=cols2)

    def test_truncated_view_flips_ordering(self):
        grid = handmade_grid()
        full = attack_strength(grid)
        assert ordering(full, "linf", "l1") == -1  # linf looks stronger
        view = truncated_view(grid, high_family="l1", low_family="linf")
        assert view.columns == ["linf@1", "linf@2", "l1@200", "l1@400"]
        assert ordering(attack_strength(view), "linf", "l1") == 1


class TestCache:
    def test_key_sensitivity(self):
        spec = tiny_spec()
        k = defense_key(DefenseSpec("linf", 8.0), spec)
        assert k == defense_key(DefenseSpec("linf", 8.0), tiny_spec())
        assert k != defense_key(DefenseSpec("linf", 4.0), spec)
        assert k != defense_key(DefenseSpec("linf", 8.0), tiny_spec(train_seed=1))
        # jpeg quality only matters for jpeg rows
        assert k == defense_key(DefenseSpec("linf", 8.0), tiny_spec(quality=50))
        j = DefenseSpec("jpeg", 0.5)
        assert defense_key(j, spec) != defense_key(j, tiny_spec(quality=50))

    def test_reuse(self, tmp_path):
        spec = tiny_spec()
        m1, path = trained_model(DefenseSpec(), spec, tmp_path)
        stamp = path.stat().st_mtime_ns
        m2, path2 = trained_model(DefenseSpec(), spec, tmp_path)
        assert path2 == path and path.stat().st_mtime_ns == stamp
        assert all(np.array_equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))
        assert (tmp_path / f"{defense_key(DefenseSpec(), spec)}.log.csv").exists()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    spec = tiny_spec()
    cache = tmp_path_factory.mktemp("cache")
    seen = []
    grid = run_grid(spec, cache, lambda r, c, a: seen.append((r, c)))
    return spec, cache, grid, seen


class TestRunGrid:
    def test_shape_and_progress(self, tiny_run):
        spec, _, grid, seen = tiny_run
        assert grid.rows == ["clean", "linf@8"]
        assert grid.columns == ["linf@0", "linf@2", "linf@8", "l2@0", "l2@100"]
        assert len(seen) == 10

    def test_zero_eps_columns_are_clean_accuracy(self, tiny_run):
        spec, cache, grid, _ = tiny_run
        eval_data = spec.eval_data.load()
        for defense in spec.defenses:
            model, _ = trained_model(defense, spec, cache)
            acc = round(accuracy(model, eval_data), 6)
            assert grid.value(defense.label, "linf@0") == acc
            assert grid.value(defense.label, "l2@0") == acc

    def test_rerun_is_identical(self, tiny_run, tmp_path):
        spec, cache, grid, _ = tiny_run
        again = run_grid(spec, cache)
        assert again.to_csv() == grid.to_csv()

    def test_worker_pool_matches_serial(self, tiny_run):
        spec, cache, grid, _ = tiny_run
        pooled = run_grid(GridSpec.from_dict({**spec.to_dict(), "workers": 2}), cache)
        assert pooled == grid

    def test_outputs(self, tiny_run, tmp_path):
        spec, _, grid, _ = tiny_run
        write_grid_outputs(grid, spec, tmp_path)
        assert AccuracyGrid.read(tmp_path / "grid.csv") == grid
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert GridSpec.from_manifest(manifest).to_dict() == spec.to_dict()

    def test_failing_cell_is_named(self, tiny_run, monkeypatch):
        spec, cache, _, _ = tiny_run

        def boom(model, data, family, eps, *args, **kw):
            if family == Family.L2 and eps > 0:
                raise FloatingPointError("diverged")
            return 1.0

        monkeypatch.setattr(harness, "evaluate_cell", boom)
        with pytest.raises(GridCellError) as info:
            run_grid(spec, cache)
        assert info.value.row == "clean" and info.value.column == "l2@100"


class TestCalibration:
    def test_zero_ladder_fails(self, tiny_run):
        spec, cache, _, _ = tiny_run
        clean, _ = trained_model(DefenseSpec(), spec, cache)
        rep = calibrate_range(
            "linf", [0.0] * 6, spec.train_data.load(), spec.eval_data.load(), clean, spec, cache
        )
        assert not rep.ok
        assert rep.principle2 == [False] * 6
        assert "never changes" in rep.message

    def test_finds_smallest_passing_scale(self, tiny_run):
        spec, cache, _, _ = tiny_run
        clean, _ = trained_model(DefenseSpec(), spec, cache)
        train, val = spec.train_data.load(), spec.eval_data.load()
        kw = dict(spec=spec, cache_dir=cache, substantial=0.3, refine=3)
        rep = calibrate_range("linf", base_ladder("linf"), train, val, clean, **kw)
        assert rep.ladder == pytest.approx([e * rep.scale for e in base_ladder("linf")])
        assert rep.principle2[-1]
        failing = [s for s, a in rep.search if rep.clean_accuracy - a < 0.3]
        passing = [s for s, a in rep.search if rep.clean_accuracy - a >= 0.3]
        assert rep.scale == min(passing)
        assert not failing or max(failing) < rep.scale
        assert rep.min_eps_clean_accuracy is not None
        again = calibrate_range("linf", base_ladder("linf"), train, val, clean, **kw)
        assert again.to_dict() == rep.to_dict()
        assert CalibrationReport.from_dict(json.loads(json.dumps(rep.to_dict()))).to_text() == rep.to_text()


def test_gallery(tmp_path):
    spec = tiny_spec()
    model, _ = trained_model(DefenseSpec(), spec, tmp_path / "cache")
    images = spec.eval_data.load().images[:2]
    paths = dump_gallery(model, images, ["linf", "elastic"], {"linf": [4.0], "elastic": [0.5, 1.0]}, tmp_path / "g")
    assert len(paths) == 2 + 2 * 3
    assert (tmp_path / "g" / "clean" / "img000.ppm").exists()
    assert (tmp_path / "g" / "elastic" / "eps_0.5" / "img001.ppm").exists()
    adv = read_ppm(tmp_path / "g" / "linf" / "eps_4" / "img000.ppm")
    assert adv.shape == images[0].shape
    assert np.abs(adv - np.round(images[0])).max() <= 4 + 1
