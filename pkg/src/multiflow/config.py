"""Plain-text key=value configuration (one pair per line, # comments)."""

from __future__ import annotations


class ConfigError(ValueError):
    pass


DEFAULTS = {
    # diffusion setup (full-scale documented defaults; trainer scales these)
    "T": "1000",
    "beta0": "0.00085",
    "betaT": "0.012",
    "schedule": "linear",  # or scaled_linear
    # model
    "embed_dim": "64",
    "context_len": "4",
    "channels": "32",
    "heads": "4",
    # sampling
    "sample_steps": "50",
    "eta": "1.0",
    "guidance_scale": "2.0",
    # alignment
    "align_steps": "300",
    "align_lr": "0.003",
    "tau_init": "0.07",
    "vi_weight": "1.0",
    "vi_text": "0",
    "lambda1": "0.005",
    "vi_projector": "0",
    # diffusion training (toy-scale learning rates; paper-scale values are
    # 1e-5 with 1e-4 weight decay for the cross-attention groups)
    "batch": "8",
    "pretrain_steps": "300",
    "backbone_lr": "0.0001",
    "pretrain_lr": "0.003",
    "flow_steps": "300",
    "ca_lr": "0.003",
    "weight_decay": "0.0001",
    "cfg_dropout": "0.1",
    "vi_on_flows": "1",
    "vi_flow_weight": "0.05",
    # data
    "n_train": "192",
    "n_val": "32",
    "data_dir": "runs/data",
    "ckpt": "runs/model.mm2g",
    "out_dir": "runs",
    "seed": "0",
}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            file_cfg = parse_config_text(fh.read())
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    if overrides:
        cfg.update({k: str(v) for k, v in overrides.items()})
    return cfg


def cfg_int(cfg, key) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key} must be an integer, got {cfg[key]!r}") from None


def cfg_float(cfg, key) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key} must be a number, got {cfg[key]!r}") from None


def cfg_bool(cfg, key) -> bool:
    val = cfg[key].lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key} must be boolean-like, got {cfg[key]!r}")
