import pytest

from sycoca.config import ConfigError, RunConfig, format_config, load_config, parse_config, parse_override


def test_empty_file_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert (cfg.model.d_model, cfg.model.lambda_ic, cfg.train.batch_size) == (64, 2.0, 32)


def test_format_parse_round_trip():
    cfg = RunConfig().replace(**{"train.seed": 9, "model.r_h": 0.25, "eval.classes": "a,b"})
    text = format_config(cfg)
    assert parse_config(text) == cfg
    assert format_config(parse_config(text)) == text


def test_comments_and_whitespace(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("# top\n\n[train]\n  seed = 4  \n# inner\nic = false\n", encoding="utf-8")
    cfg = load_config(p)
    assert cfg.train.seed == 4 and cfg.train.ic is False


@pytest.mark.parametrize(
    "text,line",
    [("[train]\nseed = 1\nbogus = 2\n", 3), ("[nope]\n", 1), ("[model]\nd_model = sixty\n", 2),
     ("seed = 1\n", 1), ("[train]\njust words\n", 2), ("[train]\nic = maybe\n", 2),
     ("[model]\nr_h = nan\n", 2)],
)
def test_errors_cite_line(text, line):
    with pytest.raises(ConfigError, match=f"line {line}"):
        parse_config(text)


@pytest.mark.parametrize(
    "text",
    ["[train]\nmim = true\n", "[model]\nr_h = 0.75\nr_l = 0.5\n", "[train]\nwarmup_steps = 2000\n",
     "[model]\nd_model = 10\n", "[train]\nbatch_size = 1\n", "[eval]\nprompt_template = nothing\n",
     "[train]\nitc = false\nic = false\ntgmim = false\n"],
)
def test_cross_field_validation(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_replace_and_override():
    base = RunConfig()
    assert parse_override(base, "train.ic=false") == ("train.ic", False)
    assert parse_override(base, "model.r_l = 0.25") == ("model.r_l", 0.25)
    for bad in ["train.ic", "nope.x=1", "train.nope=1", "train.seed=x"]:
        with pytest.raises(ConfigError):
            parse_override(base, bad)
    new = base.replace(**{"train.seed": 3})
    assert new.train.seed == 3 and base.train.seed == 0
    with pytest.raises(ConfigError):
        base.replace(**{"train.nope": 1})
