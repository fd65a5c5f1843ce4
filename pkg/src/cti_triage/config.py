"""Run configuration: one JSON file with sections, overridable by CLI flags."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .stratification import DEFAULT_BUDGET_CAP, DEFAULT_DELTA, DEFAULT_EPSILON_DIST
from .taxonomy_loop import DEFAULT_RHO


class ConfigError(Exception):
    pass


@dataclass
class Thresholds:
    delta: float = DEFAULT_DELTA
    budget: float = DEFAULT_BUDGET_CAP
    rho: float = DEFAULT_RHO
    epsilon_dist: float = DEFAULT_EPSILON_DIST
    # Accepted for config round-tripping; no pipeline step consumes it.
    stability_epsilon: Optional[float] = None


@dataclass
class RunConfig:
    seed: int = 11
    runs_dir: str = "runs"
    corpus: dict = field(default_factory=lambda: {"synthetic": {"n": 200}})
    thresholds: Thresholds = field(default_factory=Thresholds)
    decode: dict = field(default_factory=lambda: {"temperature": 0.0, "top_p": 1.0})
    agents: dict = field(
        default_factory=lambda: {
            "evaluator": {"kind": "synthetic-evaluator"},
            "classifier": [{"kind": "synthetic-classifier", "agent_id": "clf-alpha"}],
            "deliberation": [
                {"kind": "synthetic-classifier", "agent_id": "clf-alpha"},
                {"kind": "synthetic-classifier", "agent_id": "clf-beta", "disagree_bucket": 0},
                {"kind": "synthetic-classifier", "agent_id": "clf-gamma", "persist_bucket": 1},
                {"kind": "synthetic-classifier", "agent_id": "clf-delta"},
            ],
        }
    )
    annotator: Optional[dict] = field(default_factory=lambda: {"kind": "scripted"})
    service: dict = field(
        default_factory=lambda: {"addr": "127.0.0.1:8787", "token_env": "CTI_TRIAGE_TOKEN"}
    )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "runs_dir": self.runs_dir,
            "corpus": self.corpus,
            "thresholds": {
                "delta": self.thresholds.delta,
                "budget": self.thresholds.budget,
                "rho": self.thresholds.rho,
                "epsilon_dist": self.thresholds.epsilon_dist,
                "stability_epsilon": self.thresholds.stability_epsilon,
            },
            "decode": self.decode,
            "agents": self.agents,
            "annotator": self.annotator,
            "service": self.service,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        thresholds = Thresholds(**doc.get("thresholds", {}))
        config = cls(
            seed=doc.get("seed", 11),
            runs_dir=doc.get("runs_dir", "runs"),
            corpus=doc.get("corpus", {"synthetic": {"n": 200}}),
            thresholds=thresholds,
            decode=doc.get("decode", {"temperature": 0.0, "top_p": 1.0}),
            agents=doc.get("agents", cls().agents),
            annotator=doc.get("annotator", {"kind": "scripted"}),
            service=doc.get("service", cls().service),
        )
        config.validate()
        return config

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as handle:
                doc = json.load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        return cls.from_dict(doc)

    def validate(self):
        t = self.thresholds
        if not 0.0 < t.delta <= 0.5:
            raise ConfigError(f"delta must be in (0, 0.5], got {t.delta}")
        if abs(1.0 / t.delta - round(1.0 / t.delta)) > 1e-9:
            raise ConfigError(f"1/delta must be integral, got delta={t.delta}")
        if not 0.0 < t.budget <= 1.0:
            raise ConfigError(f"budget must be in (0, 1], got {t.budget}")
        if not 0.0 <= t.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {t.rho}")
        if t.epsilon_dist <= 0:
            raise ConfigError(f"epsilon_dist must be positive, got {t.epsilon_dist}")
        temperature = self.decode.get("temperature", 0.0)
        if not 0.0 <= temperature <= 0.3:
            raise ConfigError(f"temperature must be within [0.0, 0.3], got {temperature}")
        top_p = self.decode.get("top_p", 1.0)
        if not 0.8 <= top_p <= 1.0:
            raise ConfigError(f"top_p must be within [0.8, 1.0], got {top_p}")
        if len(self.agents.get("deliberation", [])) < 2:
            raise ConfigError("deliberation needs at least two agents")

    def apply_overrides(self, **overrides):
        """Flag overrides; None values are ignored."""
        for name in ("delta", "budget", "rho", "epsilon_dist"):
            value = overrides.get(name)
            if value is not None:
                setattr(self.thresholds, name, value)
        if overrides.get("seed") is not None:
            self.seed = overrides["seed"]
        if overrides.get("runs_dir") is not None:
            self.runs_dir = overrides["runs_dir"]
        if overrides.get("agents") is not None:
            wanted = [a.strip() for a in overrides["agents"].split(",") if a.strip()]
            pool = {
                a.get("agent_id"): a for a in self.agents.get("deliberation", [])
            }
            missing = [w for w in wanted if w not in pool]
            if missing:
                raise ConfigError(f"unknown deliberation agents: {missing}")
            self.agents["deliberation"] = [pool[w] for w in wanted]
        self.validate()
