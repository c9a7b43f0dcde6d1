"""LangGraph workflow behind ``unite train``."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import numpy as np
import torch
from langgraph.graph import END, StateGraph

from unite.errors import UniteError
from unite.model import UniteModel, build_model
from unite.settings import RunSettings
from unite.state import TrainingState
from unite.tools import CheckpointTool, DatasetTool
from unite.training import EpochRecord, Trainer, make_sample, mean_absolute_error, predict_features

logger = logging.getLogger(__name__)


def _prepare(state: TrainingState) -> None:
    if "errors" not in state:
        state["errors"] = []
    if "metadata" not in state:
        state["metadata"] = {}


def _fail(state: TrainingState, step: str, error: Exception) -> None:
    logger.error(f"{step} failed: {error}", exc_info=True)
    state["errors"].append(f"{step}: {error}")
    state["metadata"][f"{step}_ok"] = False


class TrainingWorkflow:
    """Config -> dataset -> features -> model -> fit -> evaluate -> checkpoints."""

    def __init__(self):
        self.datasets = DatasetTool()
        self.checkpoints = CheckpointTool()

        self.graph = self._build_workflow()
        self.app = self.graph.compile()

    def _build_workflow(self) -> StateGraph:
        """Build the LangGraph workflow with 7 nodes."""
        workflow = StateGraph(TrainingState)

        workflow.add_node("load_config", self.load_config_node)
        workflow.add_node("load_dataset", self.load_dataset_node)
        workflow.add_node("featurize", self.featurize_node)
        workflow.add_node("build_model", self.build_model_node)
        workflow.add_node("fit", self.fit_node)
        workflow.add_node("evaluate", self.evaluate_node)
        workflow.add_node("save", self.save_node)

        workflow.set_entry_point("load_config")
        order = ["load_config", "load_dataset", "featurize", "build_model", "fit", "evaluate"]
        for step, following in zip(order, order[1:]):
            workflow.add_conditional_edges(
                step,
                self._continue_after(step),
                {
                    "continue": following,
                    "skip": END,
                },
            )
        workflow.add_edge("evaluate", "save")
        workflow.add_edge("save", END)

        return workflow

    def load_config_node(self, state: TrainingState) -> TrainingState:
        """Node 1: Read the run configuration and apply CLI overrides."""
        logger.info("Node 1: Load Config")
        _prepare(state)
        try:
            settings = RunSettings.load(state["config_path"])
            state["settings"] = settings.with_overrides(**state.get("overrides", {}))
            state["metadata"]["load_config_ok"] = True
            logger.info(f"Head {state['settings'].head.kind}, loss {state['settings'].training.loss.kind}")
        except UniteError as e:
            _fail(state, "load_config", e)
        return state

    def load_dataset_node(self, state: TrainingState) -> TrainingState:
        """Node 2: Parse the dataset and check the labels the run needs."""
        logger.info("Node 2: Load Dataset")
        _prepare(state)
        try:
            settings = state["settings"]
            records = self.datasets.read(state["dataset_path"])
            self.datasets.require_labels(records, settings.head.label_key)
            if settings.training.loss.kind == "energy_force":
                self.datasets.require_labels(records, "forces_hartree_per_bohr")
            state["records"] = records
            state["metadata"]["records"] = len(records)
            state["metadata"]["load_dataset_ok"] = True
        except UniteError as e:
            _fail(state, "load_dataset", e)
        return state

    def featurize_node(self, state: TrainingState) -> TrainingState:
        """Node 3: Featurize every record (plus stencil geometries or S^rho when the loss needs them)."""
        logger.info("Node 3: Featurize")
        _prepare(state)
        try:
            settings = state["settings"]
            samples = []
            for record in state["records"]:
                forces = record.labels.get("forces_hartree_per_bohr")
                samples.append(make_sample(
                    record.geometry(),
                    record.label(settings.head.label_key),
                    settings,
                    molecule_id=self.datasets.molecule_id(record),
                    forces=forces if settings.training.loss.kind == "energy_force" else None,
                    line=record.line,
                ))
                logger.debug(f"Featurized record at line {record.line}")
            state["samples"] = samples
            state["metadata"]["featurize_ok"] = True
        except UniteError as e:
            _fail(state, "featurize", e)
        return state

    def build_model_node(self, state: TrainingState) -> TrainingState:
        """Node 4: Seed torch and build a fresh model."""
        logger.info("Node 4: Build Model")
        _prepare(state)
        try:
            settings = state["settings"]
            torch.manual_seed(settings.training.seed)
            state["model"] = build_model(settings)
            state["metadata"]["build_model_ok"] = True
        except (UniteError, ValueError) as e:
            _fail(state, "build_model", e)
        return state

    def fit_node(self, state: TrainingState) -> TrainingState:
        """Node 5: Train, writing the best-validation checkpoint as it improves."""
        logger.info("Node 5: Fit")
        _prepare(state)
        try:
            settings = state["settings"]
            output = Path(state["output_dir"])
            output.mkdir(parents=True, exist_ok=True)
            log_path = output / "train.log"
            log_path.write_text("")
            state.setdefault("checkpoints", {})

            def save_best(model: UniteModel, record: EpochRecord) -> None:
                path = self.checkpoints.save(model, settings, output / "best")
                state["checkpoints"]["best"] = str(path)
                state["metadata"]["best_epoch"] = record.epoch

            trainer = Trainer(state["model"], settings, on_improvement=save_best, log_path=log_path)
            state["result"] = trainer.fit(state["samples"])
            state["metadata"]["fit_ok"] = True
        except UniteError as e:
            _fail(state, "fit", e)
        return state

    def evaluate_node(self, state: TrainingState) -> TrainingState:
        """Node 6: MAE of the final model on the training and validation splits."""
        logger.info("Node 6: Evaluate")
        _prepare(state)
        try:
            samples, result = state["samples"], state["result"]
            predictions = predict_features(
                state["model"], [s.features for s in samples], state["settings"].training.batch_size
            )
            targets = [s.target for s in samples]
            metrics: Dict[str, float] = {}
            for split, indices in (("train", result.train_indices), ("val", result.val_indices)):
                if indices:
                    metrics[f"{split}_mae"] = mean_absolute_error(
                        [predictions[i] for i in indices], [targets[i] for i in indices]
                    )
            metrics["label_std"] = float(np.std(np.concatenate([np.ravel(t) for t in targets])))
            state["metrics"] = metrics
            state["metadata"]["predictions"] = predictions
            logger.info(f"Metrics: {metrics}")
        except UniteError as e:
            _fail(state, "evaluate", e)
        return state

    def save_node(self, state: TrainingState) -> TrainingState:
        """Node 7: Final checkpoint, metrics and per-record training predictions."""
        logger.info("Node 7: Save")
        _prepare(state)
        try:
            output = Path(state["output_dir"])
            path = self.checkpoints.save(state["model"], state["settings"], output / "final")
            state.setdefault("checkpoints", {})["final"] = str(path)
            (output / "metrics.json").write_text(json.dumps(state.get("metrics", {}), indent=2))
            predictions = state["metadata"].pop("predictions", None)
            if predictions is not None:
                with (output / "train_predictions.jsonl").open("w") as f:
                    for record, value in zip(state["records"], predictions):
                        f.write(json.dumps({"line": record.line, "prediction": np.asarray(value).tolist()}) + "\n")
            state["metadata"]["saved"] = True
        except (UniteError, OSError) as e:
            _fail(state, "save", e)
        return state

    def _continue_after(self, step: str):
        def decide(state: TrainingState) -> Literal["continue", "skip"]:
            """Conditional: Continue after this step?"""
            return "skip" if state.get("metadata", {}).get(f"{step}_ok") is False else "continue"
        return decide


def create_training_workflow():
    """
    Create and return the compiled training graph.

    Returns:
        Compiled LangGraph application
    """
    return TrainingWorkflow().app


def run_training(
    config_path,
    dataset_path,
    output_dir,
    overrides: Optional[Dict[str, Any]] = None,
) -> TrainingState:
    """Run the training graph to completion and return its final state."""
    initial: TrainingState = {
        "config_path": str(config_path),
        "dataset_path": str(dataset_path),
        "output_dir": str(output_dir),
        "overrides": overrides or {},
        "errors": [],
        "metadata": {},
        "checkpoints": {},
        "metrics": {},
    }
    return create_training_workflow().invoke(initial)
