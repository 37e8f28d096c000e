import pytest

from zsc.config import ConfigError, RunConfig, load_config, parse_config_text


def test_defaults_valid():
    cfg = RunConfig()
    cfg.validate()
    assert (cfg.selector.M, cfg.selector.k, cfg.selector.s) == (450, 10, 3)
    assert cfg.vae.n_samples == 256


def test_flat_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nselector.k = 25\ncounter.head_widths=8,8,8,8\n\nembed.lr=0.01\n")
    cfg = load_config(p, ["selector.s=5", "predictor.normalized=false"])
    assert cfg.selector.k == 25 and cfg.selector.s == 5
    assert cfg.counter.head_widths == (8, 8, 8, 8)
    assert cfg.embed.lr == 0.01
    assert cfg.predictor.normalized is False


@pytest.mark.parametrize("line", ["selector.q=3", "nosuch.k=1", "k=1", "selector"])
def test_unknown_keys_rejected(line):
    with pytest.raises(ConfigError):
        parse_config_text(line)


@pytest.mark.parametrize("ov", ["selector.k=abc", "predictor.normalized=maybe", "selector.s=20",
                                "semantic.mode=clip", "eval.split=dev", "noequals"])
def test_bad_values_rejected(ov):
    with pytest.raises(ConfigError):
        load_config(None, [ov])


def test_dump_roundtrip():
    cfg = load_config(None, ["selector.M=300", "eval.seeds=4,5"])
    again = parse_config_text(cfg.dump())
    assert again == cfg
    assert again.hash() == cfg.hash()


def test_section_hashes():
    a = RunConfig()
    b = load_config(None, ["selector.k=25"])
    assert a.hash("counter") == b.hash("counter")
    assert a.hash("selector") != b.hash("selector")
    assert a.hash() != b.hash()


def test_hash_single_keys():
    a = RunConfig()
    b = load_config(None, ["selector.k=25"])
    c = load_config(None, ["selector.size_max=30"])
    keys = ("predictor", "selector.size_min", "selector.size_max")
    assert a.hash(*keys) == b.hash(*keys) != c.hash(*keys)
