"""Experiment configuration: one strict JSON document per run.

Every field is required; unknown fields are rejected. Errors name the
offending field with a dotted path (``data.victim_task.num_classes``).
Stage seeds are derived from the master seed with :func:`derive_seed`, so any
stage can be rerun on its own.
"""
import copy
import json

import jsonschema

from .data import DatasetSpec
from .defense import BloConfig
from .errors import ConfigError
from .evaluation import canonical_json, config_hash
from .extraction import LABEL_MODES, STRATEGIES, AttackConfig
from .seeding import derive_seed

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "victim_task": {"num_classes": 10, "channels": 1, "height": 16, "width": 16,
                        "noise_sigma": 0.15, "prototype_family_seed": 20240, "contrast": 0.6,
                        "max_shift": 2, "train": 3000, "test": 1000},
        # num_classes of the shadow family is its number of distinct textures
        "shadow": {"num_classes": 500, "noise_sigma": 0.15, "prototype_family_seed": 20240,
                   "contrast": 1.0, "max_shift": 2, "count": 500},
        "verification": {"per_class": 20},
        "pool": {"count": 10000},
    },
    "victim": {"arch": "victim", "epochs": 30, "lr": 0.05, "batch_size": 64},
    "blo": {"blo_iterations": 30, "samples_per_iter": 500, "epochs_per_step": 5,
            "shadow_arch": "victim", "finetune_lr": 0.02, "shadow_lr": 0.1,
            "label_loss": "cross_entropy_soft", "batch_size": 64, "momentum": 0.9,
            "backdoor_weight": 1.0,
            "trigger": {"size": 6, "row": 4, "col": 4, "epsilon": 0.1, "alpha": 0.9,
                        "target_class": None, "mode": "masked", "init_low": 0.25,
                        "init_high": 0.75}},
    "attack": {"budget": 2000, "strategy": "random", "label_mode": "soft", "rounds": 4,
               "substitute_arch": "victim", "train_epochs": 60, "lr": 0.02, "batch_size": 64,
               "interim_epochs": 15, "loss": "cross_entropy_soft"},
    "eval": {"tau": 0.1},
    "acceptance": {"victim_acc_min": 0.90, "utility_drop_max": 0.05, "substitute_asr_min": 0.50,
                   "substitute_acc_v_min": 0.30, "covert_gap_max": 0.15,
                   "negative_control_factor": 2.0},
}

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_RATE = {"type": "number", "minimum": 0, "maximum": 1}
_STR = {"type": "string", "minLength": 1}


def _obj(**props):
    return {"type": "object", "properties": props, "required": sorted(props),
            "additionalProperties": False}


CONFIG_SCHEMA = _obj(
    seed={"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    out_dir=_STR,
    data=_obj(
        victim_task=_obj(num_classes={"type": "integer", "minimum": 2}, channels=_POS_INT,
                         height=_POS_INT, width=_POS_INT, noise_sigma=_NONNEG,
                         prototype_family_seed=_NONNEG_INT, contrast=_POS, max_shift=_NONNEG_INT,
                         train=_POS_INT, test=_POS_INT),
        shadow=_obj(num_classes={"type": "integer", "minimum": 2}, noise_sigma=_NONNEG,
                    prototype_family_seed=_NONNEG_INT, contrast=_POS, max_shift=_NONNEG_INT,
                    count=_POS_INT),
        verification=_obj(per_class=_POS_INT),
        pool=_obj(count=_POS_INT),
    ),
    victim=_obj(arch=_STR, epochs=_POS_INT, lr=_POS, batch_size=_POS_INT),
    blo=_obj(blo_iterations=_NONNEG_INT, samples_per_iter=_POS_INT, epochs_per_step=_NONNEG_INT,
             shadow_arch=_STR, finetune_lr=_POS, shadow_lr=_POS,
             label_loss={"enum": ["cross_entropy_soft", "kl"]}, batch_size=_POS_INT,
             momentum={"type": "number", "minimum": 0, "exclusiveMaximum": 1},
             backdoor_weight=_NONNEG,
             trigger=_obj(size=_NONNEG_INT, row=_NONNEG_INT, col=_NONNEG_INT, epsilon=_POS,
                          alpha=_RATE, target_class={"type": ["integer", "null"], "minimum": 0},
                          mode={"enum": ["masked", "additive"]}, init_low=_NUM, init_high=_NUM)),
    attack=_obj(budget=_POS_INT, strategy={"enum": list(STRATEGIES) + ["entropy"]},
                label_mode={"enum": list(LABEL_MODES)}, rounds=_POS_INT, substitute_arch=_STR,
                train_epochs=_POS_INT, lr=_POS, batch_size=_POS_INT, interim_epochs=_POS_INT,
                loss={"enum": ["cross_entropy_soft", "kl"]}),
    eval=_obj(tau={"type": "number", "exclusiveMinimum": 0, "maximum": 1}),
    acceptance=_obj(victim_acc_min=_RATE, utility_drop_max=_RATE, substitute_asr_min=_RATE,
                    substitute_acc_v_min=_RATE, covert_gap_max=_RATE,
                    negative_control_factor=_POS),
)


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def _error_path(err):
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        return ".".join(parts + missing[:1]), "required field is missing"
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return ".".join(parts + extra[:1]), "unknown field"
    return ".".join(parts) or "<root>", err.message


def validate_config(cfg):
    """Schema plus cross-field checks. Raises ConfigError naming the field path."""
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg),
                    key=lambda e: (list(map(str, e.absolute_path)), e.validator))
    if errors:
        path, msg = _error_path(errors[0])
        raise ConfigError(f"{path}: {msg}")
    vt, trig = cfg["data"]["victim_task"], cfg["blo"]["trigger"]
    n = vt["num_classes"]
    if trig["target_class"] is not None and trig["target_class"] >= n:
        raise ConfigError(f"blo.trigger.target_class: must be < data.victim_task.num_classes ({n})")
    if trig["row"] + trig["size"] > vt["height"] or trig["col"] + trig["size"] > vt["width"]:
        raise ConfigError("blo.trigger.size: patch does not fit the image")
    if trig["init_low"] > trig["init_high"]:
        raise ConfigError("blo.trigger.init_low: must not exceed init_high")
    if cfg["attack"]["budget"] > cfg["data"]["pool"]["count"]:
        raise ConfigError("attack.budget: exceeds data.pool.count")
    if cfg["attack"]["strategy"] != "random" and cfg["attack"]["budget"] % cfg["attack"]["rounds"]:
        raise ConfigError("attack.rounds: must divide attack.budget")
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from None
    return validate_config(cfg)


def with_overrides(cfg, seed=None, label_mode=None, strategy=None, out_dir=None):
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    if label_mode is not None:
        cfg["attack"]["label_mode"] = label_mode
    if strategy is not None:
        cfg["attack"]["strategy"] = strategy
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return validate_config(cfg)


def set_path(cfg, dotted, value):
    """Copy of ``cfg`` with ``a.b.c`` set to ``value`` (re-validated)."""
    cfg = copy.deepcopy(cfg)
    *head, last = dotted.split(".")
    node = cfg
    for key in head:
        node = node[key]
    if last not in node:
        raise ConfigError(f"{dotted}: unknown field")
    node[last] = value
    return validate_config(cfg)


def stage_seeds(cfg):
    master = cfg["seed"]
    return {"master": master, **{k: derive_seed(master, k) for k in ("data", "victim", "blo", "attack")}}


def experiment_config(cfg):
    """``cfg`` without ``out_dir``: where a run is written is not part of what it is."""
    return {k: v for k, v in cfg.items() if k != "out_dir"}


def experiment_hash(cfg):
    return config_hash(experiment_config(cfg))


def run_id(cfg):
    return experiment_hash(cfg)[:12]


def canonical_config(cfg):
    return canonical_json(cfg)


def victim_spec(cfg):
    vt = cfg["data"]["victim_task"]
    counts = {"train": vt["train"], "test": vt["test"],
              "verify": cfg["data"]["verification"]["per_class"] * vt["num_classes"]}
    return DatasetSpec(vt["num_classes"], vt["channels"], vt["height"], vt["width"], counts,
                       vt["noise_sigma"], vt["prototype_family_seed"], "victim_task", vt["max_shift"],
                       vt["contrast"])


def shadow_spec(cfg, family="shadow_ood"):
    vt, sh = cfg["data"]["victim_task"], cfg["data"]["shadow"]
    count = sh["count"] if family == "shadow_ood" else cfg["data"]["pool"]["count"]
    return DatasetSpec(sh["num_classes"], vt["channels"], vt["height"], vt["width"], {"train": count},
                       sh["noise_sigma"], sh["prototype_family_seed"], family, sh["max_shift"],
                       sh["contrast"])


def pool_spec(cfg):
    return shadow_spec(cfg, "attack_pool")


def blo_config(cfg):
    b = {k: v for k, v in cfg["blo"].items() if k != "trigger"}
    return BloConfig(seed=stage_seeds(cfg)["blo"], **b)


def attack_config(cfg):
    return AttackConfig(seed=stage_seeds(cfg)["attack"], **cfg["attack"])


def target_class(cfg):
    t = cfg["blo"]["trigger"]["target_class"]
    return cfg["data"]["victim_task"]["num_classes"] - 1 if t is None else t
