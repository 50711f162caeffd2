import pytest

from gradient_diversity import config as cfgmod
from gradient_diversity.config import ConfigError


def test_defaults_validate():
    cfg = cfgmod.load_config()
    assert cfg.data.source == "blobs"
    assert cfg.train.schedule == [(3, "cosine_max_pairwise"), (3, "angle_sum")]
    assert cfg.attack.epsilons == [0.1, 0.2, 0.3]


def test_presets():
    assert cfgmod.preset("paper-mnist").data.source == "mnist"
    fashion = cfgmod.preset("paper-fashion")
    assert fashion.data.source == "fashion" and fashion.attack.epsilons == [0.03, 0.06, 0.09]
    assert cfgmod.preset("paper-mnist").ensemble.regularized + cfgmod.preset("paper-mnist").ensemble.baselines == 5
    with pytest.raises(ConfigError):
        cfgmod.preset("imagenet")


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nschedule = 2:cosine_max_pairwise, 1:angle_sum\nbeta = 0.25\n"
                    "[ensemble]\nhidden = 32, 16\n[attack]\nkinds = fgsm\n")
    cfg = cfgmod.load_config(path, overrides={"train.beta": "0.75", "seeds.init": "9"})
    assert cfg.train.schedule == [(2, "cosine_max_pairwise"), (1, "angle_sum")]
    assert cfg.train.beta == 0.75 and cfg.seeds.init == 9
    assert cfg.ensemble.hidden == (32, 16) and cfg.attack.kinds == ["fgsm"]


@pytest.mark.parametrize("text, key", [
    ("[train]\nbogus = 1\n", "train.bogus"),
    ("[extra]\nx = 1\n", "extra"),
    ("[train]\nbeta = lots\n", "train.beta"),
    ("[train]\nbeta = -1\n", "train.beta"),
    ("[data]\nsource = cifar\n", "data.source"),
    ("[train]\nschedule = 3:wiggle\n", "train.schedule"),
    ("[ensemble]\nsize = 4\n", "train.schedule"),
    ("[gdr]\nmethod = taylor\n", "gdr.method"),
    ("[data]\nstratified = maybe\n", "data.stratified"),
])
def test_invalid_values_name_the_key(tmp_path, text, key):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigError) as info:
        cfgmod.load_config(path)
    assert info.value.key == key
    assert key in str(info.value)


def test_write_config_round_trip(tmp_path):
    cfg = cfgmod.load_config(overrides={"attack.epsilons": "0.05, 0.15", "data.stratified": "no"})
    path = cfgmod.write_config(cfg, tmp_path / "out.ini")
    assert cfgmod.load_config(path).to_dict() == cfg.to_dict()


def test_schedule_preset_names():
    assert cfgmod.parse_schedule("paper") == [(15, "cosine_max_pairwise"), (15, "angle_sum")]
    with pytest.raises(ValueError):
        cfgmod.parse_schedule("")
