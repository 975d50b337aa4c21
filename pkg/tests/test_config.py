"""Config file parsing, validation, and echo round trips."""

import dataclasses
import io

import pytest

from densesim.config import (
    TrainConfig,
    format_config,
    load_config,
    parse_config_text,
)
from densesim.errors import ConfigError


def test_empty_text_yields_defaults():
    cfg = parse_config_text("")
    assert cfg == TrainConfig(raw_text="")
    assert cfg.mode == "pretrain"
    assert cfg.lambda2 == 0.1
    assert cfg.k == 7


def test_parse_types_comments_and_blank_lines():
    text = """
# pixel branch setup
mode = seg
base_lr = 0.05      # scaled by batch/256 downstream
batch_size = 64
encoder_channels = 8, 16 ,32
region_detach = false
init_from = runs/donor.ckpt
lambda3 = 2.5e-1
"""
    cfg = parse_config_text(text)
    assert cfg.mode == "seg"
    assert cfg.base_lr == 0.05
    assert cfg.batch_size == 64
    assert cfg.encoder_channels == (8, 16, 32)
    assert cfg.region_detach is False
    assert cfg.init_from == "runs/donor.ckpt"
    assert cfg.lambda3 == 0.25
    assert cfg.raw_text == text


def test_unknown_key_reports_line_number():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("mode = pretrain\nbogus = 1\n")
    assert "line 2" in str(exc.value)
    assert "bogus" in str(exc.value)


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("seed = 1\nseed = 2\n")
    assert "seed" in str(exc.value)


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("just some words\n")
    with pytest.raises(ConfigError):
        parse_config_text("epochs = many\n")


def test_validate_rejects_vertical_flips():
    cfg = parse_config_text("vflip = true\n", validate=False)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_validate_warns_when_aux_not_finer():
    cfg = parse_config_text("mode = seg\nn = 16\nn_aux = 8\n", validate=False)
    warn = io.StringIO()
    cfg.validate(warn_stream=warn)
    assert "n_aux" in warn.getvalue()


def test_resolved_output_stride_depends_on_mode():
    assert TrainConfig(mode="pretrain").resolved_output_stride() == 8
    assert TrainConfig(mode="seg").resolved_output_stride() == 4
    assert TrainConfig(mode="seg", output_stride=8).resolved_output_stride() == 8


def test_resolved_schedule():
    assert TrainConfig(schedule="auto").resolved_schedule() in ("cosine", "constant")
    assert TrainConfig(schedule="cosine").resolved_schedule() == "cosine"
    assert TrainConfig(schedule="constant").resolved_schedule() == "constant"


def test_format_parse_round_trip():
    cfg = TrainConfig(
        mode="seg", base_lr=0.3, batch_size=8, epochs=3, n=5, n_aux=12,
        encoder_channels=(4, 8), region_detach=False, init_from="a/b.ckpt",
        lambda3=0.125, seed=99,
    )
    back = parse_config_text(format_config(cfg))
    assert dataclasses.replace(back, raw_text="") == dataclasses.replace(cfg, raw_text="")


def test_echo_text_round_trips_too():
    cfg = TrainConfig(seed=4, max_steps=17)
    back = parse_config_text(cfg.echo_text(), validate=False)
    assert dataclasses.replace(back, raw_text="") == dataclasses.replace(cfg, raw_text="")


def test_load_config_reads_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 12\nepochs = 2\n", encoding="utf-8")
    cfg = load_config(str(p))
    assert cfg.seed == 12 and cfg.epochs == 2


def test_float_echo_preserves_exact_value():
    # repr-based formatting: parse(format(x)) == x bit-for-bit
    cfg = TrainConfig(base_lr=0.1 + 2e-17, tau=1.0 / 3.0)
    back = parse_config_text(format_config(cfg))
    assert back.base_lr == cfg.base_lr
    assert back.tau == cfg.tau
