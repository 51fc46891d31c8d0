"""Run configuration with a lossless JSON round trip."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..atp import AtpPlan
from ..decoder import ModelConfig
from ..objective import BudgetConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: AtpPlan | None = field(default_factory=AtpPlan)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    lr_model: float = 2e-3
    lr_atp: float = 1e-2
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    warmup_steps: int = 20
    epochs: int = 3
    pretrain_epochs: int = 0
    precision: str = "float64"
    batch_size: int = 16
    seed: int = 0
    data_seed: int | None = None
    n_train: int = 3000
    n_eval: int = 300
    freeze_model: bool = False
    init_checkpoint: str | None = None

    @property
    def dataset_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["model"] = self.model.to_dict()
        doc["model"]["grid"] = list(self.model.grid)
        doc["plan"] = None if self.plan is None else self.plan.to_dict()
        doc["budget"] = self.budget.to_dict()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        model = ModelConfig(**doc.pop("model", {}))
        plan_doc = doc.pop("plan", {})
        plan = None if plan_doc is None else AtpPlan(**plan_doc)
        budget = BudgetConfig(**doc.pop("budget", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(model=model, plan=plan, budget=budget, **doc)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def desk_config(**overrides) -> RunConfig:
    """The default desk model: 8 layers, 8x8 grid, sites (1, 4, 6), N_target 16."""
    return RunConfig(**overrides)
