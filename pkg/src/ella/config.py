"""INI-style run configuration: sections, ``#`` comments, bracketed arrays.

Values are parsed as Python literals where possible (numbers, lists,
``true``/``false``) and kept as bare strings otherwise. Unknown sections or
keys are errors, so a typo can never be silently ignored.
"""

import ast
import configparser
import copy
import math
from pathlib import Path

from .harness import RunConfig
from .tasks import KINDS, StreamOrder, TaskSpec

REQUIRED = object()

SCHEMA = {
    "stream": {
        "name": "interference",
        "kind": REQUIRED,
        "tasks": REQUIRED,
        "order": [],
        "unseen": [],
        "seed": 0,
        "n_features": 16,
        "n_classes": 4,
        "variance": 0.5,
        "mean_scale": 3.0,
        "mean_seed": 0,
        "samples_per_class": 200,
        "test_samples_per_class": 100,
    },
    "model": {
        "hidden_sizes": [32],
        "activation": "tanh",
        "rank": 4,
        "adapted_layers": "all",
        "weight_scale": 1.0,
    },
    "optimizer": {
        "kind": "adam",
        "learning_rate": 0.01,
        "momentum": 0.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "steps_per_task": 300,
        "batch_size": 64,
    },
    "ella": {
        "method": "ella",
        "lambda_schedule": REQUIRED,
        "epsilon": 1e-8,
        "ortho_lambda": 1.0,
        "seed": 0,
    },
    "output": {
        "dir": "runs/default",
        "diag_batches": 32,
        "bin_width": 0.1,
        "sweep_lambdas": [0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
        "with_baseline": True,
    },
}

DEFAULTS = {
    "stream": {"kind": "rotated-gaussians", "tasks": [0.0, math.pi / 2], "unseen": [math.pi / 4]},
    "ella": {"lambda_schedule": [0.0, 1.0]},
}

COMMENTS = {
    "stream": "task stream; `tasks` holds one entry per task, read according to `kind`:\n"
    "#   rotated-gaussians -> rotation angle (radians)\n"
    "#   permuted-features -> permutation seed\n"
    "#   label-remap       -> label permutation seed\n"
    "#   csv               -> path to a csv file (header, features..., label)\n"
    "# `unseen` lists extra tasks of the same kind used only for general ability;\n"
    "# `order` optionally reorders `tasks` by index",
    "model": "frozen MLP and adapters; `adapted_layers` is `all` or a list of layer indices",
    "optimizer": "`kind` is sgd or adam",
    "ella": "`method` is ella, seqlora or ortho-baseline; first lambda is normally 0",
    "output": "run directory (flag and $ELLA_OUTPUT_DIR take precedence) and diagnostics",
}


class ConfigError(ValueError):
    pass


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def render_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(render_value(v) if not isinstance(v, str) else repr(v) for v in value) + "]"
    return str(value) if not isinstance(value, float) else repr(value)


def default_settings():
    settings = {}
    for section, keys in SCHEMA.items():
        settings[section] = {
            k: copy.deepcopy(DEFAULTS.get(section, {}).get(k, v)) for k, v in keys.items()
        }
    return settings


def default_config_text():
    lines = ["# continual-learning run configuration", ""]
    for section, values in default_settings().items():
        lines.append("# " + COMMENTS[section])
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {render_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _set(settings, dotted, value, source):
    section, _, key = dotted.partition(".")
    if section not in SCHEMA:
        raise ConfigError(f"{source}: unknown section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{source}: unknown key {dotted!r}")
    settings[section][key] = value


def apply_overrides(settings, overrides):
    """Apply ``section.key=value`` strings on top of ``settings``."""
    for item in overrides or ():
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        _set(settings, dotted.strip(), parse_value(raw), "override")
    return settings


def load_settings(path, overrides=None):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    settings = {section: dict(keys) for section, keys in SCHEMA.items()}
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(settings, f"{section}.{key}", parse_value(raw), str(path))
    apply_overrides(settings, overrides)
    for section, keys in settings.items():
        for key, value in keys.items():
            if value is REQUIRED:
                raise ConfigError(f"{path}: missing required key {section}.{key}")
    return settings


def _task(kind, value, seed, s):
    common = {
        "n_features": s["n_features"],
        "n_classes": s["n_classes"],
        "variance": s["variance"],
        "mean_scale": s["mean_scale"],
        "mean_seed": s["mean_seed"],
    }
    if kind == "rotated-gaussians":
        params = {**common, "angle": float(value)}
    elif kind == "permuted-features":
        params = {**common, "permutation_seed": int(value)}
    elif kind == "label-remap":
        params = {**common, "remap_seed": int(value)}
    else:
        params = {"path": str(value), "num_classes": s["n_classes"]}
    return TaskSpec(kind, params, seed, s["samples_per_class"], s["test_samples_per_class"])


def _expect(cond, key, message):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def build_run_config(settings):
    """Validate a settings mapping and turn it into a :class:`RunConfig`."""
    s, m, o, e, out = (settings[k] for k in ("stream", "model", "optimizer", "ella", "output"))
    _expect(s["kind"] in KINDS, "stream.kind", f"must be one of {KINDS}")
    for key in ("tasks", "order", "unseen"):
        _expect(isinstance(s[key], (list, tuple)), f"stream.{key}", "must be a [list]")
    _expect(len(s["tasks"]) > 0, "stream.tasks", "must not be empty")
    tasks = [_task(s["kind"], v, s["seed"] * 1000 + i, s) for i, v in enumerate(s["tasks"])]
    if s["order"]:
        _expect(
            sorted(s["order"]) == list(range(len(tasks))),
            "stream.order",
            f"must be a permutation of 0..{len(tasks) - 1}",
        )
        tasks = [tasks[i] for i in s["order"]]
    unseen = [_task(s["kind"], v, s["seed"] * 1000 + 500 + i, s) for i, v in enumerate(s["unseen"])]
    layers = m["adapted_layers"]
    _expect(
        layers == "all" or isinstance(layers, (list, tuple)),
        "model.adapted_layers",
        "must be `all` or a list of layer indices",
    )
    schedule = e["lambda_schedule"]
    _expect(isinstance(schedule, (list, tuple)), "ella.lambda_schedule", "must be a [list]")
    _expect(
        len(schedule) == len(tasks),
        "ella.lambda_schedule",
        f"has {len(schedule)} entries but the stream has {len(tasks)} tasks",
    )
    _expect(isinstance(out["sweep_lambdas"], (list, tuple)), "output.sweep_lambdas", "must be a [list]")
    try:
        return RunConfig(
            stream=StreamOrder(tasks, name=str(s["name"])),
            lambda_schedule=schedule,
            rank=int(m["rank"]),
            hidden_sizes=m["hidden_sizes"],
            activation=str(m["activation"]),
            weight_scale=float(m["weight_scale"]),
            adapted_layers=None if layers == "all" else layers,
            optimizer=str(o["kind"]),
            learning_rate=float(o["learning_rate"]),
            momentum=float(o["momentum"]),
            beta1=float(o["beta1"]),
            beta2=float(o["beta2"]),
            steps_per_task=int(o["steps_per_task"]),
            batch_size=int(o["batch_size"]),
            epsilon=float(e["epsilon"]),
            seed=int(e["seed"]),
            method=str(e["method"]),
            ortho_lambda=float(e["ortho_lambda"]),
            unseen_tasks=unseen,
            diag_batches=int(out["diag_batches"]),
            bin_width=float(out["bin_width"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides=None):
    return build_run_config(load_settings(path, overrides))
