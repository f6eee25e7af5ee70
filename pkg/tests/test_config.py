import json

import pytest

from metaloss.config import ConfigError, load_config, parse_config

MINIMAL = {"family": {"kind": "advection"}, "seeds": {"meta_train": 1, "meta_test": 2}}


def with_(**kw):
    data = json.loads(json.dumps(MINIMAL))
    data.update(kw)
    return data


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.parametrization == "lal" and cfg.inner.steps == 20
    assert cfg.outer.clip.mode == "clip_norm" and cfg.outer.clip.cap == 1.0
    assert cfg.inner_spec().learning_rate == 1e-2


def test_missing_family_is_named():
    with pytest.raises(ConfigError, match=r"^family: Field required"):
        parse_config({"seeds": {"meta_train": 1, "meta_test": 2}})


def test_missing_seeds_is_named():
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"family": {"kind": "regression"}})


@pytest.mark.parametrize(
    "patch, path",
    [
        ({"outer": {"learning_rate": -1}}, "outer.learning_rate"),
        ({"outer": {"clip": {"mode": "clip_value"}}}, "outer.clip.mode"),
        ({"inner": {"kind": "rmsprop"}}, "inner.kind"),
        ({"inner": {"stepz": 3}}, "inner.stepz"),
        ({"family": {"kind": "heat"}}, "family.kind"),
        ({"family": {"kind": "burgers"}}, "family"),
        ({"test": {"architecture": "wide"}}, "test.architecture"),
    ],
)
def test_errors_carry_field_paths(patch, path):
    with pytest.raises(ConfigError) as info:
        parse_config(with_(**patch))
    assert str(info.value).startswith(path)


def test_ood_test_distribution_checked_against_family():
    with pytest.raises(ConfigError, match="test.distribution"):
        parse_config(with_(test={"distribution": "ood"}))
    parse_config(with_(family={"kind": "burgers", "regime": "r1"}, test={"distribution": "ood"}))


def test_json_roundtrip_and_seed_override():
    cfg = parse_config(with_(learn_weights=True, network={"hidden_layers": 2, "hidden_width": 9}))
    assert parse_config(cfg.to_json()) == cfg
    seeded = cfg.with_seed(42)
    assert seeded.seeds.meta_train == seeded.seeds.meta_test == 42
    assert cfg.net_spec().hidden_width == 9 and cfg.net_spec().input_dim == 2


def test_library_specs():
    cfg = parse_config(with_(regularization=True, outer={"kind": "sgd", "resample_every": None}))
    mt = cfg.meta_train_config()
    assert mt.outer.penalty.enabled and mt.outer.kind == "sgd" and mt.outer.resample_every is None
    assert mt.seed == 1
    proto = cfg.test_protocol()
    assert proto.kind == "advection" and proto.n_tasks == 5 and proto.optimizer.learning_rate == 1e-2


def test_load_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"family": ')
    with pytest.raises(ConfigError, match="line 1"):
        load_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        load_config(arr)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
