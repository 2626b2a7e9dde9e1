"""Run stages on an output directory.

Every stage reads its inputs from ``out_dir`` and writes its outputs there,
so stages run one by one produce the same bytes as :func:`full_run`.

Layout::

    data/{victim_train,victim_test,verify,shadow,pool}.hpds
    victim.hpnt
    protected/{backbone,honeypot}.hpnt, protected/trigger.hptr, protected/history.json
    substitute.hpnt, transfer.hpds[.qlog]                   (defended oracle)
    substitute_undefended.hpnt, transfer_undefended.hpds[.qlog]
    extract.json, report.json, timings.json
"""
import csv
import json
import os
import shutil
import time
from pathlib import Path

from . import config as C
from .data import class_balanced_subset, generate, read_dataset, write_dataset
from .defense import init_trigger, load_protected, run_blo, save_protected, success_rate
from .errors import HoneypotError, NumericError, UsageError
from .evaluation import canonical_json, emit_report, model_metrics, reverse_attack, verify_ownership
from .extraction import CountingOracle, build_transfer_set, train_substitute, write_transfer_set
from .seeding import make_rng
from .victim import VictimModel, load_checkpoint, save_checkpoint, train_victim

DATA_FILES = ("victim_train", "victim_test", "verify", "shadow", "pool")
ORACLES = ("defended", "undefended")


class StageError(HoneypotError):
    """A numeric abort, tagged with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except NumericError as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        run.stage = name
        return run
    return wrap


def _need(path):
    if not Path(path).exists():
        raise UsageError(f"missing input {path}; run the earlier stage first")
    return path


def _write_json(obj, path):
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(canonical_json(obj) + "\n")


def _read_json(path):
    with open(_need(path), encoding="ascii") as f:
        return json.load(f)


def load_data(out_dir):
    d = Path(out_dir) / "data"
    return {name: read_dataset(_need(d / f"{name}.hpds"), name) for name in DATA_FILES}


def load_victim(out_dir):
    return VictimModel(load_checkpoint(_need(Path(out_dir) / "victim.hpnt")))


def load_protected_model(out_dir):
    p = Path(out_dir) / "protected"
    return load_protected(_need(p / "backbone.hpnt"), _need(p / "honeypot.hpnt"),
                          _need(p / "trigger.hptr"))


def _substitute_path(out_dir, oracle):
    return Path(out_dir) / ("substitute.hpnt" if oracle == "defended" else "substitute_undefended.hpnt")


@_stage("gen-data")
def gen_data(cfg, out_dir):
    """Write the five dataset files; returns them by name."""
    seed = C.stage_seeds(cfg)["data"]
    vspec, n = C.victim_spec(cfg), cfg["data"]["victim_task"]["num_classes"]
    sets = {
        "victim_train": generate(vspec, seed, "train"),
        "victim_test": generate(vspec, seed, "test"),
        "verify": class_balanced_subset(generate(vspec, seed, "verify"),
                                        cfg["data"]["verification"]["per_class"], seed),
        "shadow": generate(C.shadow_spec(cfg), seed, "train"),
        "pool": generate(C.pool_spec(cfg), seed, "train"),
    }
    assert sets["verify"].num_classes == n
    d = Path(out_dir) / "data"
    d.mkdir(parents=True, exist_ok=True)
    for name, ds in sets.items():
        write_dataset(ds, d / f"{name}.hpds")
    return sets


@_stage("train-victim")
def train_victim_stage(cfg, out_dir):
    data = load_data(out_dir)
    v = cfg["victim"]
    victim = train_victim(data["victim_train"], data["victim_test"], v["arch"], v["epochs"],
                          C.stage_seeds(cfg)["victim"], v["lr"], v["batch_size"])
    save_checkpoint(victim.net, Path(out_dir) / "victim.hpnt")
    return victim


@_stage("defend")
def defend(cfg, out_dir):
    data, victim = load_data(out_dir), load_victim(out_dir)
    blo = C.blo_config(cfg)
    t = cfg["blo"]["trigger"]
    trig = init_trigger(data["shadow"].shape, C.target_class(cfg), t["size"], t["row"], t["col"],
                        t["epsilon"], t["alpha"], make_rng(blo.seed, "blo/trigger"),
                        t["init_low"], t["init_high"], t["mode"])
    protected = run_blo(victim, data["shadow"], data["verify"], blo, trig)
    p = Path(out_dir) / "protected"
    p.mkdir(parents=True, exist_ok=True)
    save_protected(protected, p / "backbone.hpnt", p / "honeypot.hpnt", p / "trigger.hptr")
    _write_json(protected.history, p / "history.json")
    return protected


@_stage("extract")
def extract(cfg, out_dir, oracles=ORACLES):
    """Extract a substitute from each requested oracle with the same query seed."""
    pool = load_data(out_dir)["pool"]
    victim = load_victim(out_dir)
    acfg = C.attack_config(cfg)
    meta_path = Path(out_dir) / "extract.json"
    meta = _read_json(meta_path) if meta_path.exists() else {}
    subs = {}
    for which in oracles:
        target = load_protected_model(out_dir) if which == "defended" else victim
        oracle = CountingOracle(target.predict)
        ts = build_transfer_set(oracle, pool, acfg, num_classes=victim.num_classes)
        suffix = "" if which == "defended" else "_undefended"
        write_transfer_set(ts, Path(out_dir) / f"transfer{suffix}.hpds")
        sub = train_substitute(ts, acfg)
        save_checkpoint(sub, _substitute_path(out_dir, which))
        meta[which] = {"label_mode": acfg.label_mode, "strategy": acfg.strategy,
                       "budget": acfg.budget, "substitute_arch": acfg.substitute_arch,
                       "oracle_calls": oracle.calls, "queried_samples": oracle.samples}
        subs[which] = sub
    _write_json(meta, meta_path)
    return subs


def _checks(cfg, report):
    a, chance = cfg["acceptance"], report["chance_rate"]
    sub, und = report["substitute"], report["undefended"]
    limit = a["negative_control_factor"] * chance

    def check(value, op, threshold):
        ok = value >= threshold if op == ">=" else value <= threshold
        return {"value": value, "op": op, "threshold": threshold, "passed": bool(ok)}

    checks = {
        "victim_acc_c": check(report["victim"]["acc_c"], ">=", a["victim_acc_min"]),
        "utility_drop": check(abs(report["victim"]["acc_c"] - report["protected"]["acc_c"]), "<=",
                              a["utility_drop_max"]),
        "substitute_asr": check(sub["asr"], ">=", a["substitute_asr_min"]),
        "substitute_acc_v": check(sub["acc_v"], ">=", a["substitute_acc_v_min"]),
        "covert_gap": check(abs(und["acc_c"] - sub["acc_c"]), "<=", a["covert_gap_max"]),
        "negative_control_acc_v": check(und["acc_v"], "<=", limit),
        "negative_control_asr": check(und["asr"], "<=", limit),
        "ownership_defended": {"value": report["verification"]["decision"], "expected": True,
                               "passed": report["verification"]["decision"] is True},
        "ownership_undefended": {"value": report["verification"]["undefended_decision"],
                                 "expected": False,
                                 "passed": report["verification"]["undefended_decision"] is False},
    }
    return {"checks": checks, "passed": all(c["passed"] for c in checks.values())}


@_stage("evaluate")
def evaluate(cfg, out_dir):
    """Score every model on the full victim test set and write ``report.json``."""
    data = load_data(out_dir)
    test, verify = data["victim_test"], data["verify"]
    victim, protected = load_victim(out_dir), load_protected_model(out_dir)
    trig = protected.trigger
    subs = {w: load_checkpoint(_need(_substitute_path(out_dir, w))) for w in ORACLES}
    meta = _read_json(Path(out_dir) / "extract.json")
    history = _read_json(Path(out_dir) / "protected" / "history.json")
    tau = cfg["eval"]["tau"]
    defended_v = verify_ownership(subs["defended"], trig, test, tau)
    undefended_v = verify_ownership(subs["undefended"], trig, test, tau)
    report = {
        "run_id": C.run_id(cfg),
        "config_hash": C.experiment_hash(cfg),
        "config": C.experiment_config(cfg),
        "seeds": C.stage_seeds(cfg),
        "chance_rate": 1.0 / test.num_classes,
        "evaluation_set": {"name": "victim_test", "count": len(test),
                           "acc_v_excludes_target_class": True},
        "victim": model_metrics(victim, test, trig),
        "protected": {**model_metrics(protected, test, trig),
                      "trigger_success": success_rate(protected.logits, verify.inputs,
                                                      verify.labels, trig)},
        "substitute": {**model_metrics(subs["defended"], test, trig), **meta.get("defended", {})},
        "undefended": {**model_metrics(subs["undefended"], test, trig),
                       **meta.get("undefended", {})},
        "verification": {**defended_v.to_dict(), "undefended_acc_v": undefended_v.acc_v,
                         "undefended_decision": undefended_v.decision},
        "reverse_attack": {w: reverse_attack(subs[w], test, trig) for w in ORACLES},
        "trigger": {"target_class": trig.target_class, "patch": list(trig.patch),
                    "epsilon": trig.epsilon, "alpha": trig.alpha, "mode": trig.mode},
        "blo_history": history,
        # deterministic work counters; wall-clock seconds live in timings.json
        "timings": {"blo_iterations": len(history),
                    "victim_epochs": cfg["victim"]["epochs"],
                    "substitute_epochs": cfg["attack"]["train_epochs"],
                    "oracle_queries": {w: m["queried_samples"] for w, m in sorted(meta.items())}},
    }
    report["acceptance"] = _checks(cfg, report)
    emit_report(report, Path(out_dir) / "report.json")
    return report


STAGES = [("gen-data", gen_data), ("train-victim", train_victim_stage), ("defend", defend),
          ("extract", extract), ("evaluate", evaluate)]


def full_run(cfg, out_dir, skip=()):
    """All stages in order; wall-clock seconds per stage go to ``timings.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seconds, result = {}, None
    for name, fn in STAGES:
        if name in skip:
            continue
        start = time.perf_counter()
        result = fn(cfg, out_dir)
        seconds[name] = time.perf_counter() - start
    seconds["total"] = sum(seconds.values())
    with open(out_dir / "timings.json", "w") as f:
        json.dump({"seconds": seconds}, f, indent=2, sort_keys=True)
    return result


# -- sweeps ------------------------------------------------------------------

SWEEP_AXES = {"trigger-size": ("blo.trigger.size", int),
              "substitute-arch": ("attack.substitute_arch", str),
              "budget": ("attack.budget", int)}
SWEEP_COLUMNS = ["value", "victim_acc", "protected_acc", "substitute_acc_c", "acc_v", "asr", "status"]


def _link_shared(shared, row_dir, names):
    row_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        src, dst = shared / name, row_dir / name
        if src.is_dir():
            if dst.exists():
                shutil.rmtree(dst)
            shutil.copytree(src, dst, copy_function=os.link)
        else:
            shutil.copyfile(src, dst)


def sweep(cfg, out_dir, axis, values):
    """One full run per value, sharing every stage the axis does not touch.

    All rows use the base config's master seed, so rows differ only in the
    swept field. A failing row is recorded with its error and the sweep
    continues. Writes ``sweep-<axis>.csv`` and returns the rows.
    """
    if axis not in SWEEP_AXES:
        raise UsageError(f"axis must be one of {sorted(SWEEP_AXES)}")
    path, cast = SWEEP_AXES[axis]
    out_dir = Path(out_dir)
    shared = out_dir / "shared"
    configs = [(v, C.set_path(cfg, path, cast(v))) for v in values]
    gen_data(cfg, shared)
    train_victim_stage(cfg, shared)
    share_blo = axis != "trigger-size"
    shared_files = ["data", "victim.hpnt"]
    if share_blo:
        defend(cfg, shared)
        shared_files.append("protected")
    else:
        # the undefended baseline does not depend on the trigger
        extract(cfg, shared, oracles=("undefended",))
        shared_files += ["substitute_undefended.hpnt", "transfer_undefended.hpds",
                         "transfer_undefended.hpds.qlog", "extract.json"]
    rows = []
    for value, row_cfg in configs:
        row_dir = out_dir / f"{axis}-{value}"
        row = {"value": value}
        try:
            _link_shared(shared, row_dir, shared_files)
            if not share_blo:
                defend(row_cfg, row_dir)
            extract(row_cfg, row_dir, oracles=ORACLES if share_blo else ("defended",))
            rep = evaluate(row_cfg, row_dir)
            row.update(victim_acc=rep["victim"]["acc_c"], protected_acc=rep["protected"]["acc_c"],
                       substitute_acc_c=rep["substitute"]["acc_c"], acc_v=rep["substitute"]["acc_v"],
                       asr=rep["substitute"]["asr"], status="ok")
        except (HoneypotError, OSError) as exc:
            row.update(status=f"error: {exc}")
        rows.append(row)
    with open(out_dir / f"sweep-{axis}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v)
                             for k, v in row.items()})
    return rows
