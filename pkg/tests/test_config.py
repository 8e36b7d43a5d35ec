import json

import pytest

from advtransfer.config import ConfigError, grid_spec, ladders, load_config, parse_config, schedule, seeds
from advtransfer.geometry import Family
from advtransfer.harness import DefenseSpec

TEXT = """
# desk grid
train.per_class = 20     # small
train.size = 16
eval.seed = 7
schedule.epochs = 4
schedule.decay_epochs = 2, 3
schedule.base_lr = 0.02
attacks = linf, jpeg
defenses = clean, linf, jpeg@0.25
ladder.linf = 1, 2, 4
seed.model = 3
"""


def test_parse_comments_and_lists():
    cfg = parse_config(TEXT)
    assert cfg["train.per_class"] == "20"
    assert cfg["schedule.decay_epochs"] == "2, 3"
    assert "desk grid" not in str(cfg)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("bogus = 1", "unknown key"),
        ("ladder.l3 = 1", "unknown key"),
        ("seed.model = 1\nseed.model = 2", "duplicate"),
        ("just words", "expected key = value"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment) as info:
        parse_config(text, "x.cfg")
    assert info.value.line is not None


def test_grid_spec_from_text():
    spec = grid_spec(parse_config(TEXT))
    assert spec.train_data.per_class == 20 and spec.train_data.size == 16
    assert spec.eval_data.seed == 7 and spec.eval_data.per_class == 50
    assert spec.schedule.epochs == 4 and spec.schedule.decay_epochs == (2, 3)
    assert spec.schedule.base_lr == 0.02
    assert spec.row_labels == ["clean", "linf@4", "jpeg@0.25"]
    assert [a.family for a in spec.attacks] == [Family.LINF, Family.JPEG]
    assert spec.attacks[0].ladder == (1.0, 2.0, 4.0)
    assert (spec.model_seed, spec.train_seed, spec.eval_seed) == (3, 0, 0)


def test_seed_override_sets_every_seed():
    assert seeds(parse_config(TEXT), 11) == {"model_seed": 11, "train_seed": 11, "eval_seed": 11}
    assert grid_spec(parse_config(TEXT), seed=11).train_seed == 11


def test_ladder_sources(tmp_path):
    calib = tmp_path / "calibration.json"
    calib.write_text(json.dumps({"reports": [{"family": "l2", "ladder": [5.0, 10.0]}]}))
    cfg = parse_config(f"ladder.linf = 3, 6\ncalibration = {calib}")
    out = ladders(cfg, ["linf", "l2", "l1"])
    assert out[Family.LINF] == [3.0, 6.0]
    assert out[Family.L2] == [5.0, 10.0]
    assert out[Family.L1][0] > 0 and len(out[Family.L1]) == 6


def test_defaults():
    spec = grid_spec({})
    assert len(spec.attacks) == 5
    assert spec.defenses[0] == DefenseSpec()
    assert len(spec.defenses) == 6
    assert spec.schedule == schedule({})


def test_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        grid_spec(parse_config("schedule.epochs = many"))
    with pytest.raises(ConfigError):
        grid_spec(parse_config("attacks = linf, fisheye"))
    path = tmp_path / "c.cfg"
    path.write_text("nope = 1\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert str(path) in str(info.value)


def test_relative_paths_follow_the_file(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (sub / "run.cfg").write_text("calibration = calib/out.json\ncache = /abs/cache\n")
    cfg = load_config(sub / "run.cfg")
    assert cfg["calibration"] == str(sub / "calib" / "out.json")
    assert cfg["cache"] == "/abs/cache"
