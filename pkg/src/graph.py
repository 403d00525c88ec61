from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, TypedDict

from langgraph.graph import END, StateGraph

from .errors import McnetError
from .metrics import EvaluationReport
from .pipeline import (
    DatasetManifest,
    ExperimentConfig,
    TrainResult,
    evaluate_checkpoint,
    train_denoiser,
    train_mcnet,
)

logger = logging.getLogger(__name__)


class ExperimentState(TypedDict, total=False):
    """State shared across the experiment workflow nodes."""

    run_dir: str
    route: Literal["train_dn", "train_mcnet"]
    dn_checkpoint: Optional[str]
    mcnet_checkpoint: Optional[str]
    best_epoch: int
    best_val_pe: float
    report: Optional[dict[str, float]]
    resume: Optional[str]
    error: Optional[str]


@dataclass
class ExperimentResources:
    """Inputs shared by every node; trainers are injectable for testing."""

    config: ExperimentConfig
    manifest: DatasetManifest
    eval_manifest: Optional[DatasetManifest] = None
    denoiser_trainer: Callable[..., TrainResult] = train_denoiser
    mcnet_trainer: Callable[..., TrainResult] = train_mcnet
    evaluator: Callable[..., EvaluationReport] = evaluate_checkpoint
    results: dict[str, object] = field(default_factory=dict)


def router_node(resources: ExperimentResources):
    def _node(state: ExperimentState) -> ExperimentState:
        model = resources.config.model
        # a learned denoiser needs its own training pass unless one is supplied
        needs_dn = model.preprocessing == "learned_dn" and not model.end_to_end
        previous = Path(state["run_dir"]) / "checkpoints" / "dn_best.ckpt"
        if needs_dn and not state.get("dn_checkpoint") and state.get("resume") and previous.exists():
            logger.info("resuming with the denoiser from %s", previous)
            state["dn_checkpoint"] = str(previous)
        if needs_dn and not state.get("dn_checkpoint"):
            state["route"] = "train_dn"
        else:
            state["route"] = "train_mcnet"
        return state

    return _node


def train_dn_node(resources: ExperimentResources):
    def _node(state: ExperimentState) -> ExperimentState:
        cfg = resources.config
        result = resources.denoiser_trainer(resources.manifest, cfg.dn_schedule, cfg.model, run_dir=state["run_dir"])
        resources.results["denoiser"] = result
        if result.checkpoint is None:
            state["error"] = "denoiser training produced no checkpoint"
            return state
        state["dn_checkpoint"] = str(result.checkpoint)
        logger.info("denoiser best epoch %d, val loss %.6g", result.best_epoch, result.best_metric)
        return state

    return _node


def train_mcnet_node(resources: ExperimentResources):
    def _node(state: ExperimentState) -> ExperimentState:
        if state.get("error"):
            return state
        cfg = resources.config
        result = resources.mcnet_trainer(
            resources.manifest,
            cfg.schedule,
            cfg.model,
            dn_checkpoint=state.get("dn_checkpoint"),
            run_dir=state["run_dir"],
            resume=state.get("resume"),
        )
        resources.results["mcnet"] = result
        state["best_epoch"] = result.best_epoch
        state["best_val_pe"] = result.best_metric
        state["mcnet_checkpoint"] = str(result.checkpoint) if result.checkpoint else None
        return state

    return _node


def evaluate_node(resources: ExperimentResources):
    def _node(state: ExperimentState) -> ExperimentState:
        if state.get("error"):
            return state
        if not state.get("mcnet_checkpoint"):
            state["error"] = "no checkpoint selected (is select_from_epoch beyond the last epoch run?)"
            return state
        cfg = resources.config
        manifest = resources.eval_manifest or resources.manifest
        try:
            report = resources.evaluator(
                state["mcnet_checkpoint"],
                manifest,
                cfg.run.eval_split,
                config=cfg.model,
                out_dir=Path(state["run_dir"]) / "reports",
                orientation=cfg.run.wauc_orientation,
            )
        except McnetError as e:
            logger.exception("evaluation failed")
            state["error"] = str(e)
            return state
        resources.results["report"] = report
        state["report"] = dict(report.rows())
        return state

    return _node


def build_graph(resources: ExperimentResources):
    """Build and compile the route -> [train_dn] -> train_mcnet -> evaluate workflow."""
    workflow = StateGraph(ExperimentState)
    workflow.add_node("router", router_node(resources))
    workflow.add_node("train_dn", train_dn_node(resources))
    workflow.add_node("train_mcnet", train_mcnet_node(resources))
    workflow.add_node("evaluate", evaluate_node(resources))
    workflow.set_entry_point("router")

    def route_decision(state: ExperimentState) -> str:
        return state["route"]

    workflow.add_conditional_edges("router", route_decision, {"train_dn": "train_dn", "train_mcnet": "train_mcnet"})
    workflow.add_edge("train_dn", "train_mcnet")
    workflow.add_edge("train_mcnet", "evaluate")
    workflow.add_edge("evaluate", END)
    return workflow.compile()


def run_experiment(resources: ExperimentResources, run_dir: str | Path, **initial: object) -> ExperimentState:
    app = build_graph(resources)
    state: ExperimentState = {"run_dir": str(run_dir), **initial}  # type: ignore[typeddict-item]
    return app.invoke(state)
