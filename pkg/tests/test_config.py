import pytest

from sitepool.config import ConfigError, RunConfig, parse_config_text, validate_config


def test_empty_config_echoes_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = validate_config(path)
    assert cfg == RunConfig()
    text = cfg.to_text()
    for line in ("hypermean_sd = 1000.0", "scale_prior = 10.0", "lkj_eta = 3.0",
                 "ridge_sweep = 0.25, 0.5, 1.0, 3.0", "chains = 4", "target_accept = 0.8",
                 "scale_upper = none"):
        assert line in text.splitlines()


def test_colon_override_and_round_trip():
    cfg = parse_config_text("lkj_eta: 2\n")
    assert cfg.lkj_eta == 2.0 and "lkj_eta = 2.0" in cfg.to_text()
    assert parse_config_text(cfg.to_text()) == cfg
    assert parse_config_text(cfg.to_text()).hash() == cfg.hash()


def test_lists_bools_and_paths(tmp_path):
    cfg = parse_config_text("outcomes = profit, revenue  # two\nallow_nonconverged = yes\n"
                            "microdata = data/m.csv\nstandardize_outcome = auto\n", tmp_path)
    assert cfg.outcomes == ("profit", "revenue")
    assert cfg.allow_nonconverged is True and cfg.standardize_outcome is None
    assert cfg.microdata == str(tmp_path / "data" / "m.csv")


def test_chains_zero_rejected():
    with pytest.raises(ConfigError, match="chains must be positive"):
        parse_config_text("chains: 0")


def test_errors_aggregated():
    with pytest.raises(ConfigError) as info:
        parse_config_text("chanis = 4\nwarmup = many\nlkj_eta = 2\nlkj_eta = 3\nnonsense\n")
    errs = info.value.errors
    assert len(errs) == 4
    assert "unknown key 'chanis'" in errs[0]
    assert any("duplicate" in e for e in errs)
    with pytest.raises(ConfigError) as info:
        parse_config_text("chains = 0\ntarget_accept = 1.5\nfamilies = rubin, site_ridge\n")
    assert len(info.value.errors) == 3


def test_flags_win_over_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 3\nchains = 2\n")
    cfg = validate_config(path, {"seed": 9, "chains": None})
    assert cfg.seed == 9 and cfg.chains == 2


def test_runnability():
    with pytest.raises(ConfigError, match="microdata"):
        validate_config(None, {"families": ("full_data_joint",)}, runnable=True)
    with pytest.raises(ConfigError, match="interactions needs"):
        validate_config(None, {"microdata": "m.csv", "outcomes": ("y",), "families": ("interactions",)},
                        runnable=True)
    assert validate_config(None, {"summaries": "s.csv"}, runnable=True).resolved_families() == \
        ("rubin_summary",)


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SITEPOOL_OUTPUT_ROOT", str(tmp_path))
    assert RunConfig().resolved_out_dir() == str(tmp_path / "sitepool-output")
    assert RunConfig(out_dir="x").resolved_out_dir() == "x"


def test_priors_and_sampler_views():
    cfg = parse_config_text("scale_upper = 20\nlkj_eta = 2\ntarget_accept = 0.9\nseed = 5\n")
    assert cfg.priors().scale_upper == 20.0 and cfg.priors(ridge_sd=3.0).ridge_sd == 3.0
    s = cfg.sampler()
    assert s.target_accept == 0.9 and s.seed == 5
