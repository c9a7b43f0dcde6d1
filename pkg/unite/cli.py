"""Command-line interface: ``unite featurize|train|predict|check|eval``.

Exit codes: 0 on success, 1 on a failed command or failed check, 2 on bad arguments.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import config
from unite.checks import SUITES, run_suite
from unite.density import (
    DENSITY_CUTOFF,
    GRID_SPACING,
    DensityCoeffs,
    average_epsilon_rho,
    density_evaluate,
    molecule_epsilon_rho,
    rectilinear_grid,
)
from unite.errors import DomainError, FeaturizationError, MissingParameterError, UniteError, UnknownSuiteError
from unite.featurizer import channel_names, featurize
from unite.graph import MoleculeFeatures
from unite.model import UniteModel
from unite.settings import ModelSettings, RunSettings
from unite.tools import CheckpointTool, CubeTool, DatasetTool, MoleculeRecord
from unite.toy_data import make_toy_dataset
from unite.training import fd_forces, mean_absolute_error, predict_features
from unite.workflow import run_training

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = config.LOG_LEVEL) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


def parse_cube_spec(text: str) -> float:
    """``spacing=0.2`` or a bare number -> voxel spacing in Bohr."""
    value = text.split("=", 1)[1] if "=" in text else text
    key = text.split("=", 1)[0] if "=" in text else "spacing"
    try:
        spacing = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid cube spec {text!r}; expected spacing=<Bohr>")
    if key != "spacing" or spacing <= 0:
        raise argparse.ArgumentTypeError(f"invalid cube spec {text!r}; expected spacing=<positive Bohr>")
    return spacing


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def featurize_records(records: Sequence[MoleculeRecord], settings: RunSettings) -> List[MoleculeFeatures]:
    features = []
    for record in records:
        geometry = record.geometry()
        try:
            tensor, state = featurize(geometry, settings.featurizer)
        except FeaturizationError as e:
            raise FeaturizationError(f"line {record.line}: {e}") from e
        features.append(MoleculeFeatures(tensor, geometry, state.e_tb))
    return features


def predict_records(
    model: UniteModel, settings: RunSettings, records: Sequence[MoleculeRecord], batch_size: int = 8
) -> Tuple[List[MoleculeFeatures], List[np.ndarray]]:
    """Predictions in record order; an uncovered element is reported with the first record holding it."""
    features = featurize_records(records, settings)
    try:
        return features, predict_features(model, features, batch_size)
    except MissingParameterError as e:
        culprit = next(r for r in records if e.element in r.atoms)
        raise MissingParameterError(e.table, e.element, record=f"line {culprit.line}") from e


def _write_json(data, output: Optional[str]) -> None:
    text = json.dumps(data, indent=2)
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_featurize(args: argparse.Namespace) -> int:
    datasets = DatasetTool()
    if args.make_toy is not None:
        records = make_toy_dataset(
            args.make_toy,
            seed=args.seed,
            atoms_range=(args.min_atoms, args.max_atoms),
            conformers=args.conformers,
            with_forces=not args.no_forces,
            with_density=not args.no_density,
        )
        datasets.write(args.output, records)
        return 0

    settings = RunSettings.load(args.config) if args.config else RunSettings()
    if args.fmo_features:
        settings = settings.with_overrides(fmo_features=True)
    records = datasets.read(args.dataset)
    arrays = {}
    for record, features in zip(records, featurize_records(records, settings)):
        key = f"line{record.line}"
        arrays[f"{key}_data"] = features.tensor.data
        arrays[f"{key}_atoms"] = np.asarray(record.atoms)
        arrays[f"{key}_coords"] = features.geometry.coords
        arrays[f"{key}_e_tb"] = np.asarray(features.e_tb)
    arrays["channels"] = np.asarray(channel_names(settings.featurizer))
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    np.savez(args.output, **arrays)
    logger.info(f"Wrote features of {len(records)} records to {args.output}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "delta_learning": args.delta_learning, "fmo_features": args.fmo_features}
    state = run_training(args.config, args.dataset, args.output_dir, overrides)
    if state.get("errors"):
        for error in state["errors"]:
            logger.error(error)
        return 1
    logger.info(f"Checkpoints: {state.get('checkpoints', {})}")
    logger.info(f"Metrics: {state.get('metrics', {})}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, settings = CheckpointTool().load(args.checkpoint)
    records = DatasetTool().read(args.dataset)
    kind = settings.head.kind
    if args.forces and kind != "energy":
        raise DomainError(f"--forces needs an energy checkpoint, got head {kind!r}")
    if args.density_cube is not None and kind != "density":
        raise DomainError(f"--density-cube needs a density checkpoint, got head {kind!r}")

    features, predictions = predict_records(model, settings, records, args.batch_size)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    cubes = CubeTool()
    with output.open("w") as f:
        for record, feats, value in zip(records, features, predictions):
            row = {"line": record.line, "atoms": record.atoms, "prediction": np.asarray(value).tolist()}
            if record.molecule_id:
                row["molecule_id"] = record.molecule_id
            if args.forces:
                row["forces"] = fd_forces(
                    model, feats.geometry, settings.featurizer, settings.training.force_step
                ).tolist()
            if args.density_cube is not None:
                coeffs = DensityCoeffs(tuple(record.atoms), value)
                grid = rectilinear_grid(feats.geometry.coords, args.density_cube)
                field = density_evaluate(coeffs, feats.geometry.coords, grid.points())
                path = output.with_name(f"{output.stem}_line{record.line}.cube")
                cubes.write(path, grid, record.atoms, feats.geometry.coords, field, f"predicted density line {record.line}")
                row["cube"] = str(path)
            f.write(json.dumps(row) + "\n")
    logger.info(f"Wrote {len(records)} predictions to {output}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, settings = CheckpointTool().load(args.checkpoint)
    datasets = DatasetTool()
    records = datasets.read(args.dataset)
    key = settings.head.label_key
    datasets.require_labels(records, key)
    features, predictions = predict_records(model, settings, records, args.batch_size)
    targets = [r.label(key) for r in records]
    metrics = {"records": len(records), f"{key}_mae": mean_absolute_error(predictions, targets)}

    if args.forces and settings.head.kind == "energy":
        labelled = [(r, f) for r, f in zip(records, features) if "forces_hartree_per_bohr" in r.labels]
        if labelled:
            predicted = [fd_forces(model, f.geometry, settings.featurizer, settings.training.force_step)
                         for _, f in labelled]
            metrics["forces_hartree_per_bohr_mae"] = mean_absolute_error(
                predicted, [r.label("forces_hartree_per_bohr") for r, _ in labelled]
            )

    if settings.head.kind == "density":
        errors, electrons = [], []
        for record, feats, value, target in zip(records, features, predictions, targets):
            reference = DensityCoeffs(tuple(record.atoms), target.reshape(len(record.atoms), -1))
            predicted = DensityCoeffs(tuple(record.atoms), value)
            errors.append(molecule_epsilon_rho(reference, predicted, feats.geometry, args.spacing, args.cutoff))
            electrons.append(feats.geometry.n_electrons)
        metrics["epsilon_rho_per_molecule"] = average_epsilon_rho(errors, electrons, "molecule")
        metrics["epsilon_rho_per_electron"] = average_epsilon_rho(errors, electrons, "electron")

    _write_json(metrics, args.output)
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    options = {}
    if args.suite == "equivariance":
        options["inject_bug"] = args.inject_bug
        if args.quick:
            options.update(n_molecules=3, n_transforms=2, settings=ModelSettings.small())
    elif args.inject_bug:
        logger.warning(f"--inject-bug only affects the equivariance suite, ignored for {args.suite}")
    if args.quick and args.suite == "cg":
        options["trials"] = 200
    if args.quick and args.suite == "extensivity":
        options["n_molecules"] = 2
    if args.quick and args.suite == "scaling":
        options["units"] = (4, 8, 16, 32)
    if args.quick and args.suite == "gradcheck":
        options["heads"] = ("energy", "dipole")

    try:
        report = run_suite(args.suite, scale=args.tolerance_scale, seed=args.seed, **options)
    except UnknownSuiteError as e:
        logger.error(str(e))
        return 2
    _write_json(report.to_dict(), args.report)
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unite", description="Equivariant networks on toy tight-binding features")
    parser.add_argument("--threads", type=int, default=config.THREADS, help="torch intra-op threads (1 = deterministic)")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="logging level")
    commands = parser.add_subparsers(dest="command", required=True)

    featurize_cmd = commands.add_parser("featurize", help="featurize a dataset or generate a toy dataset")
    featurize_cmd.add_argument("dataset", nargs="?", help="JSON-lines dataset to featurize")
    featurize_cmd.add_argument("--output", required=True, help="output .npz (features) or .jsonl (--make-toy)")
    featurize_cmd.add_argument("--config", help="run configuration supplying featurizer settings")
    featurize_cmd.add_argument("--fmo-features", action="store_true", help="add D_h/D_p channels")
    featurize_cmd.add_argument("--make-toy", type=int, metavar="N", help="generate N random toy molecules instead")
    featurize_cmd.add_argument("--seed", type=int, default=config.SEED)
    featurize_cmd.add_argument("--conformers", type=int, default=1, help="geometries per toy molecule")
    featurize_cmd.add_argument("--min-atoms", type=int, default=2)
    featurize_cmd.add_argument("--max-atoms", type=int, default=4)
    featurize_cmd.add_argument("--no-forces", action="store_true", help="skip force labels")
    featurize_cmd.add_argument("--no-density", action="store_true", help="skip density-coefficient labels")
    featurize_cmd.set_defaults(handler=cmd_featurize)

    train_cmd = commands.add_parser("train", help="train a model")
    train_cmd.add_argument("config", help="JSON run configuration")
    train_cmd.add_argument("dataset", help="JSON-lines training data")
    train_cmd.add_argument("--output-dir", default=config.OUTPUT_DIR)
    train_cmd.add_argument("--seed", type=int, default=None)
    train_cmd.add_argument("--delta-learning", action="store_true", help="regress the residual to E_TB")
    train_cmd.add_argument("--fmo-features", action="store_true", help="add D_h/D_p channels")
    train_cmd.set_defaults(handler=cmd_train)

    predict_cmd = commands.add_parser("predict", help="predict with a checkpoint")
    predict_cmd.add_argument("checkpoint", help="checkpoint manifest (.json)")
    predict_cmd.add_argument("dataset")
    predict_cmd.add_argument("--output", required=True, help="JSON-lines predictions")
    predict_cmd.add_argument("--forces", action="store_true", help="add 5-point stencil forces")
    predict_cmd.add_argument("--density-cube", type=parse_cube_spec, metavar="spacing=BOHR",
                             help="write predicted densities as cube files")
    predict_cmd.add_argument("--batch-size", type=int, default=8)
    predict_cmd.set_defaults(handler=cmd_predict)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint against labels")
    eval_cmd.add_argument("checkpoint")
    eval_cmd.add_argument("dataset")
    eval_cmd.add_argument("--output", help="also write the metrics JSON here")
    eval_cmd.add_argument("--forces", action="store_true", help="include force MAE (energy heads)")
    eval_cmd.add_argument("--spacing", type=float, default=GRID_SPACING, help="density grid spacing in Bohr")
    eval_cmd.add_argument("--cutoff", type=float, default=DENSITY_CUTOFF, help="reference density cutoff")
    eval_cmd.add_argument("--batch-size", type=int, default=8)
    eval_cmd.set_defaults(handler=cmd_eval)

    check_cmd = commands.add_parser("check", help=f"run a property suite ({', '.join(SUITES)})")
    check_cmd.add_argument("suite")
    check_cmd.add_argument("--inject-bug", action="store_true", help="scale one CG entry by 1.01")
    check_cmd.add_argument("--quick", action="store_true", help="small model and fewer samples")
    check_cmd.add_argument("--seed", type=int, default=config.SEED)
    check_cmd.add_argument("--tolerance-scale", type=float, default=config.CHECK_TOLERANCE_SCALE)
    check_cmd.add_argument("--report", help="also write the JSON report here")
    check_cmd.set_defaults(handler=cmd_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "featurize" and args.make_toy is None and not args.dataset:
        parser.error("featurize needs a dataset or --make-toy N")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    configure_logging(args.log_level)
    torch.set_num_threads(args.threads)
    try:
        return args.handler(args)
    except UniteError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
