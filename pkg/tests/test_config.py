from pathlib import Path

import pytest

from composer_gar import config
from composer_gar.config import CONFIG_KEYS, ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_volleyball_defaults():
    cfg = config.volleyball()
    m = cfg.model
    assert (m.d, m.d_mlp, m.heads, m.dropout, m.blocks) == (256, 1024, (2, 8, 2, 2), (0.5, 0.2, 0.2, 0.0), 2)
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.lr_drop_epoch, cfg.lr_dropped) == (45, 256, 5e-4, 40, 1e-4)
    assert (cfg.weight_decay, cfg.lam) == (1e-3, 3.0)
    c = cfg.cluster
    assert (c.K, c.tau, c.eps, c.sinkhorn_iters) == (1000, 0.1, 0.05, 3)
    assert cfg.aug.perturb_px == 1.0


def test_cad_preset():
    cfg = config.cad()
    assert cfg.model.d == 128 and cfg.model.grouping == "kmeans"


def test_desk_preset():
    cfg = config.desk()
    m = cfg.model
    assert (m.d, m.d_mlp, m.heads) == (32, 128, (2, 4, 2, 2))
    assert (cfg.batch_size, cfg.cluster.K, cfg.epochs) == (32, 32, 30)
    assert (cfg.lr, cfg.lam, cfg.weight_decay, m.dropout) == (5e-4, 3.0, 1e-3, (0.5, 0.2, 0.2, 0.0))


@pytest.mark.parametrize("preset", sorted(config.PRESETS))
def test_dump_load_round_trip(preset):
    cfg = config.PRESETS[preset]()
    assert config.loads(config.dumps(cfg)) == cfg


def test_every_key_dumped():
    text = config.dumps(config.desk())
    assert [line.split(" = ")[0] for line in text.splitlines()] == list(CONFIG_KEYS)


def test_missing_key_named():
    text = "".join(line + "\n" for line in config.dumps(config.desk()).splitlines()
                   if not line.startswith("cluster.tau"))
    with pytest.raises(ConfigError, match="cluster.tau") as info:
        config.loads(text)
    assert info.value.key == "cluster.tau"


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key: model.width"):
        config.loads("model.width = 3", require_all=False)


@pytest.mark.parametrize("line", ["model.d = abc", "model.multiscale = maybe", "model.heads = 2,x"])
def test_bad_values(line):
    with pytest.raises(ConfigError, match="bad value"):
        config.loads(line, require_all=False)


def test_comments_and_blank_lines():
    cfg = config.loads("# header\n\nmodel.d = 64  # wider\nmodel.heads = 2,4,2,2\n", require_all=False)
    assert cfg.model.d == 64


@pytest.mark.parametrize("key,value", [("model.num_scales", "5"), ("model.d", "30"),
                                       ("model.grouping", "spectral"), ("cluster.K", "1"),
                                       ("model.d_fourier", "7"), ("model.blocks", "0")])
def test_validation(key, value):
    cfg = config.desk()
    config.set_key(cfg, key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_shipped_configs_load():
    files = sorted(CONFIGS.glob("*.txt"))
    assert {f.stem for f in files} >= {"desk", "volleyball", "cad", "no_mst", "no_cluster", "no_aux"}
    for f in files:
        config.load(f)
    assert config.load(CONFIGS / "no_mst.txt").model.multiscale is False
    assert config.load(CONFIGS / "no_cluster.txt").cluster.enabled is False
    assert config.load(CONFIGS / "desk.txt") == config.desk()
