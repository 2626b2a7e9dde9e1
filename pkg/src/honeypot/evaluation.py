"""Clean/verification accuracy, attack success, ownership decision and reports."""
import hashlib
import json
import math
from dataclasses import dataclass

import jsonschema
import numpy as np

from .defense import apply_trigger
from .errors import UsageError

DEFAULT_TAU = 0.10


def _predictions(model, inputs, batch_size=1024):
    """Argmax labels of ``model``: a Network/VictimModel/ProtectedModel or a logits callable."""
    fn = model.logits if hasattr(model, "logits") else model
    return np.concatenate([np.asarray(fn(inputs[i:i + batch_size])).argmax(axis=1)
                           for i in range(0, len(inputs), batch_size)])


def _labeled(test):
    if test.labels is None:
        raise UsageError("evaluation needs a labeled test set")
    if len(test) == 0:
        raise UsageError("evaluation set is empty")


def clean_accuracy(model, test):
    _labeled(test)
    return float((_predictions(model, test.inputs) == test.labels).mean())


def verification_accuracy(model, test, trig):
    """Share of triggered non-target samples classified as the target class."""
    _labeled(test)
    keep = test.labels != trig.target_class
    if not keep.any():
        raise UsageError("every evaluation sample belongs to the target class")
    pred = _predictions(model, apply_trigger(test.inputs[keep], trig))
    return float((pred == trig.target_class).mean())


def attack_success_rate(model, test, trig):
    """Share of all triggered samples (target class included) classified as the target."""
    if len(test) == 0:
        raise UsageError("evaluation set is empty")
    pred = _predictions(model, apply_trigger(test.inputs, trig))
    return float((pred == trig.target_class).mean())


@dataclass(frozen=True)
class Verification:
    acc_v: float
    tau: float
    decision: bool
    chance_rate: float

    def to_dict(self):
        return {"acc_v": self.acc_v, "tau": self.tau, "decision": self.decision,
                "chance_rate": self.chance_rate}


def verify_ownership(suspect, trig, test, tau=DEFAULT_TAU):
    """Claim ownership iff the suspect's verification accuracy exceeds ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"tau must lie in (0, 1], got {tau}")
    acc_v = verification_accuracy(suspect, test, trig)
    return Verification(acc_v, float(tau), bool(acc_v > tau), 1.0 / test.num_classes)


def reverse_attack(model, test, trig):
    """Stamp the trigger on every input: the substitute's accuracy before and after.

    A substitute that inherited the backdoor collapses to the target class,
    so the defender can switch off a stolen model's utility at will.
    """
    _labeled(test)
    triggered = float((_predictions(model, apply_trigger(test.inputs, trig)) == test.labels).mean())
    return {"acc_c": clean_accuracy(model, test), "triggered_acc_c": triggered,
            "asr": attack_success_rate(model, test, trig)}


def model_metrics(model, test, trig):
    return {"acc_c": clean_accuracy(model, test),
            "acc_v": verification_accuracy(model, test, trig),
            "asr": attack_success_rate(model, test, trig)}


# -- canonical JSON ----------------------------------------------------------

def _canon(obj):
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = format(x, ".17g")
        return text if any(c in text for c in ".e") else text + ".0"  # keep floats floats
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=True)
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ",".join(f"{json.dumps(k)}:{_canon(v)}" for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(_canon(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj):
    """Sorted keys, no whitespace, floats with 17 significant digits, NaN as null."""
    return _canon(obj)


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode("ascii")).hexdigest()


# -- report ------------------------------------------------------------------

_RATE = {"type": "number", "minimum": 0.0, "maximum": 1.0}
_METRICS = {"type": "object", "required": ["acc_c", "acc_v", "asr"],
            "properties": {"acc_c": _RATE, "acc_v": _RATE, "asr": _RATE}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["run_id", "config_hash", "config", "seeds", "chance_rate", "evaluation_set",
                 "victim", "protected", "substitute", "undefended", "verification", "timings"],
    "properties": {
        "run_id": {"type": "string", "pattern": "^[0-9a-f]{12}$"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "config": {"type": "object"},
        "seeds": {"type": "object", "required": ["master"],
                  "additionalProperties": {"type": "integer", "minimum": 0}},
        "chance_rate": _RATE,
        "evaluation_set": {"type": "object", "required": ["name", "count"]},
        "victim": {"type": "object", "required": ["acc_c"], "properties": {"acc_c": _RATE}},
        "protected": {"type": "object", "required": ["acc_c", "acc_v", "asr", "trigger_success"],
                      "properties": {"acc_c": _RATE, "acc_v": _RATE, "asr": _RATE,
                                     "trigger_success": _RATE}},
        "substitute": _METRICS,
        "undefended": _METRICS,
        "verification": {
            "type": "object", "required": ["tau", "decision", "acc_v", "chance_rate",
                                           "undefended_decision"],
            "properties": {"tau": _RATE, "decision": {"type": "boolean"},
                           "undefended_decision": {"type": "boolean"}},
        },
        "acceptance": {"type": "object", "required": ["checks", "passed"]},
        "timings": {"type": "object"},
    },
}


def validate_report(report):
    """Raise ``jsonschema.ValidationError`` if required keys or ranges are off."""
    jsonschema.validate(report, REPORT_SCHEMA)


def emit_report(report, path):
    """Validate and write ``report`` as canonical JSON (newline-terminated)."""
    validate_report(report)
    text = canonical_json(report) + "\n"
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(text)
    return text
