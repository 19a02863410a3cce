"""JSON configuration: strict schema validation with schema-held defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import jsonschema

from .core import ChannelModel, ClientModel, ModelError, gilbert_elliott

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Unreadable, schema-invalid or semantically invalid configuration."""


def load_schema() -> dict:
    return json.loads(resources.files("das_index").joinpath("schema/config.schema.json").read_text())


def _fill_defaults(validator_class):
    """Validator that writes ``default`` values into missing properties before validating them."""
    validate_properties = validator_class.VALIDATORS["properties"]

    def set_defaults(validator, properties, instance, schema):
        if isinstance(instance, dict):
            for name, sub in properties.items():
                if "default" in sub and name not in instance:
                    instance[name] = copy.deepcopy(sub["default"])
        yield from validate_properties(validator, properties, instance, schema)

    return jsonschema.validators.extend(validator_class, {"properties": set_defaults})


_Validator = _fill_defaults(jsonschema.Draft7Validator)


@dataclass
class Config:
    data: dict
    sha256: str

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def section(self, name: str) -> dict:
        return self.data[name]

    def header(self, command: str) -> str:
        return f"das-index schema={SCHEMA_VERSION} command={command} config_sha256={self.sha256} seed={self.seed}"


def resolve(data: dict, seed: int | None = None) -> Config:
    """Validate ``data``, fill defaults, apply a seed override and hash the result."""
    data = copy.deepcopy(data)
    errors = sorted(_Validator(load_schema()).iter_errors(data), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(str(p) for p in e.path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    # a second pass fills defaults nested inside defaults that were just inserted
    _Validator(load_schema()).validate(data)
    if seed is not None:
        data["seed"] = int(seed)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return Config(data, hashlib.sha256(canonical.encode()).hexdigest())


def load_config(path, seed: int | None = None) -> Config:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve(data, seed)


def client_issues(cfg: Config) -> list[str]:
    """Model invariant violations per client, without raising."""
    issues = []
    for n, spec in enumerate(cfg.data["clients"]):
        try:
            build_client(spec)
        except (ModelError, ValueError) as exc:
            issues.append(f"client {n}: {exc}")
    return issues


def build_client(spec: dict) -> tuple[ClientModel, ChannelModel | None]:
    model = ClientModel(spec["buffer_capacity"], spec["playtime_per_packet"], spec["quality_disutilities"],
                        spec["power_levels"], spec["success_prob"], spec["outage_period_weight"])
    if "channel" in spec and "gilbert_elliott" in spec:
        raise ModelError("give either channel or gilbert_elliott, not both")
    channel = None
    if "channel" in spec:
        channel = ChannelModel.from_dict(spec["channel"])
        problems = channel.issues(model)
        if problems:
            raise ModelError("; ".join(problems))
    elif "gilbert_elliott" in spec:
        ge = spec["gilbert_elliott"]
        channel = gilbert_elliott(model, ge["p_good_to_bad"], ge["p_bad_to_good"], ge["bad_scale"])
    return model, channel


def build_clients(cfg: Config) -> tuple[list[ClientModel], list[ChannelModel | None]]:
    problems = client_issues(cfg)
    if problems:
        raise ConfigError("invalid client models:\n  " + "\n  ".join(problems))
    pairs = [build_client(spec) for spec in cfg.data["clients"]]
    return [p[0] for p in pairs], [p[1] for p in pairs]
