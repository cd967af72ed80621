"""Command-line entry point for data generation, training, inference and reports.

Every command reads its randomness from a single seed (config ``seed`` or the
``--seed`` flag), exits 0 on success, 1 on user errors and 2 on internal
failures, and reports errors as one ``error[kind]: message`` line on stderr.
The ``CAUSALMESH_CACHE`` environment variable relocates the artifact cache
used by helper scripts and the test suite (see ``causalmesh.config.cache_dir``).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .cohort import CohortManifest, GroundTruthScm, load_split_arrays, sample_cohort
from .config import CACHE_ENV_VAR, ConfigError, load_config
from .evaluation import (
    PcaModel,
    latent_interpolation,
    pca_compactness,
    reconstruction_table,
    shape_projection,
    specificity,
    counterfactual_trajectories,
    trait_preservation,
    write_trajectory_csv,
)
from .mesh.io import MeshIOError, read_ply, write_ply, write_surface
from .mesh.surface import SurfaceMesh, ved
from .scm import CovariateRecord, Intervention, make_model
from .training import (
    EpochStats,
    derive_template,
    fit_whitening,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_model,
)

EVAL_SUITES = (
    "reconstruction",
    "compactness",
    "specificity",
    "interpolation",
    "trait-preservation",
    "trajectories",
    "projection",
)


class UserError(Exception):
    """Invalid invocation or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _load_manifest(data_dir) -> CohortManifest:
    path = Path(data_dir) / "manifest.csv"
    if not path.is_file():
        raise UserError(f"no manifest.csv under {data_dir}")
    return CohortManifest.read(path)


def _load_subject(manifest: CohortManifest, subject_id: str):
    for row in manifest.rows:
        if row.id == subject_id:
            vertices, faces, _ = read_ply(manifest.mesh_file(row))
            record = CovariateRecord(
                a=row.age, s=float(row.sex), b=row.brain_volume, v=row.structure_volume
            )
            return record, vertices, faces
    raise UserError(f"subject '{subject_id}' not in manifest")


def _load_model(checkpoint):
    path = Path(checkpoint)
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _parse_do(tokens) -> Intervention:
    try:
        return Intervention.parse(tokens)
    except (ValueError, KeyError) as err:
        raise UserError(str(err)) from err


def _out_dir(args, default: str) -> Path:
    out = Path(args.out if args.out else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_training_log(path, log: list) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "elbo", "alpha", "recon", "kl", "recon_ved", "val_elbo"])
        for e in log:
            writer.writerow(
                [
                    e.epoch,
                    *(format(x, ".17g") for x in (e.elbo, e.alpha, e.recon, e.kl, e.recon_ved)),
                    "" if e.val_elbo is None else format(e.val_elbo, ".17g"),
                ]
            )


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config, args.set)
    scm = GroundTruthScm(subdivisions=cfg.template.subdivisions)
    counts = (cfg.data.n_train, cfg.data.n_val, cfg.data.n_test)
    manifest = sample_cohort(scm, counts, seed=cfg.seed, out_dir=cfg.data.dir)
    print(manifest.path())
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    manifest = _load_manifest(cfg.data.dir)
    train_data = load_split_arrays(manifest, "train")
    val_data = load_split_arrays(manifest, "val") if manifest.split("val") else None
    tcfg = replace(cfg.training, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        model, payload = _load_model(args.resume)
        prior_log = [EpochStats(**e) for e in payload["training_log"]]
        start_epoch = prior_log[-1].epoch if prior_log else 0
        optimizer = make_optimizer(model, tcfg)
        if payload.get("optimizer_state"):
            optimizer.load_state_dict(payload["optimizer_state"])
    else:
        template = derive_template(train_data)
        model = make_model_from_config(cfg, template, fit_whitening(train_data))
        prior_log = []
        start_epoch = 0
        optimizer = make_optimizer(model, tcfg)

    remaining = cfg.training.epochs - start_epoch
    ckpt_path = out / "checkpoint.pt"
    if remaining > 0:
        run_cfg = replace(tcfg, epochs=remaining)
        log = prior_log + train_model(
            model,
            train_data,
            run_cfg,
            val_data=val_data,
            start_epoch=start_epoch,
            optimizer=optimizer,
        )
    else:
        log = prior_log
    save_checkpoint(ckpt_path, model, log, optimizer)
    _write_training_log(out / "training_log.csv", log)
    print(ckpt_path)
    return 0


def make_model_from_config(cfg, template: SurfaceMesh, normalisations: dict):
    return make_model(
        template,
        cfg.model.cvae_config(),
        normalisations=normalisations,
        seed=cfg.seed,
        spline_bins=cfg.model.spline_bins,
    )


def cmd_reconstruct(args) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = _load_manifest(args.data)
    record, vertices, _ = _load_subject(manifest, args.subject)
    mesh = SurfaceMesh(model.template.topology, vertices)
    _, recon = model.counterfactual(record, mesh, Intervention({}))
    out = _out_dir(args, "reconstructions")
    path = out / f"recon_{args.subject}.ply"
    write_ply(path, recon.vertices, recon.topology.faces)
    print(f"{path} ved_mm={ved(recon, mesh):.6g}")
    return 0


def cmd_intervene(args) -> int:
    model, _ = _load_model(args.checkpoint)
    iv = _parse_do(args.do or "")
    g = torch.Generator().manual_seed(args.seed)
    z = torch.randn(model.cvae.config.latent_dim, dtype=torch.float64, generator=g)
    meshes, records = model.intervene_population(iv, z, args.n, seed=args.seed + 1)
    out = _out_dir(args, "interventions")
    with open(out / "covariates.csv", "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "a", "s", "b", "v"])
        for i, (mesh, record) in enumerate(zip(meshes, records)):
            name = f"sample_{i:04d}"
            write_ply(out / f"{name}.ply", mesh.vertices, mesh.topology.faces)
            writer.writerow(
                [name] + [format(x, ".17g") for x in (record.a, record.s, record.b, record.v)]
            )
    print(out)
    return 0


def cmd_counterfact(args) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = _load_manifest(args.data)
    record, vertices, _ = _load_subject(manifest, args.subject)
    mesh = SurfaceMesh(model.template.topology, vertices)
    do_list = args.do if args.do else [""]
    out = _out_dir(args, "counterfactuals")
    rows = []
    for i, tokens in enumerate(do_list):
        iv = _parse_do(tokens)
        r_cf, m_cf = model.counterfactual(record, mesh, iv)
        path = out / f"cf_{args.subject}_{i:02d}.ply"
        write_ply(path, m_cf.vertices, m_cf.topology.faces)
        rows.append(
            {
                "step": f"do {tokens}".strip() if tokens else "null",
                "a": r_cf.a,
                "s": r_cf.s,
                "b": r_cf.b,
                "v": r_cf.v,
                "ved_to_observed": ved(m_cf, mesh),
            }
        )
    write_trajectory_csv(out / f"trajectory_{args.subject}.csv", rows)
    print(out)
    return 0


def cmd_evaluate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = _load_manifest(args.data)
    train_data = load_split_arrays(manifest, "train")
    test_data = load_split_arrays(manifest, "test")
    out = _out_dir(args, "reports")
    seed = args.seed
    suites = list(EVAL_SUITES) if args.suite == "all" else [args.suite]
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(model.cvae.config.latent_dim, dtype=torch.float64, generator=g)

    for suite in suites:
        if suite == "reconstruction":
            pca = PcaModel.fit(train_data["x"], k=32)
            reconstruction_table(model, test_data, pca, seed=seed).write(out)
        elif suite == "compactness":
            sampled = model.sample_observational(len(test_data["a"]), seed=seed)
            gen = np.stack([m.vertices for _, m, _ in sampled])
            pca_compactness(test_data["x"], gen, k=16).write(out)
        elif suite == "specificity":
            med_b = float(np.median(test_data["b"]))
            med_v = float(np.median(test_data["v"]))
            med_a = float(np.median(test_data["a"]))
            interventions = {
                "do_a_s": Intervention({"a": med_a + 10.0, "s": 1.0}),
                "do_b_v": Intervention({"b": 1.1 * med_b, "v": 1.1 * med_v}),
            }
            specificity(model, z, interventions, args.n_per_setting, test_data, seed=seed).write(out)
        elif suite == "interpolation":
            dims = range(1, min(8, model.cvae.config.latent_dim))
            shapes = latent_interpolation(
                model,
                dims,
                offset=0.8,
                v_bar=float(np.median(test_data["v"])),
                b_bar=float(np.median(test_data["b"])),
            )
            for label, mesh, disp in shapes:
                write_ply(
                    out / f"interp_{label}.ply",
                    mesh.vertices,
                    mesh.topology.faces,
                    scalars=disp,
                )
        elif suite == "trait-preservation":
            trait_preservation(model, test_data, max_subjects=args.max_subjects).write(out)
        elif suite == "trajectories":
            subject = args.subject or manifest.split("test")[0].id
            record, vertices, _ = _load_subject(manifest, subject)
            mesh = SurfaceMesh(model.template.topology, vertices)
            families = counterfactual_trajectories(model, record, mesh)
            for family, rows in families.items():
                write_trajectory_csv(out / f"trajectory_{family}.csv", rows)
        elif suite == "projection":
            shape_projection(model, z, n=args.n_projection, seed=seed).write(out)
    print(out)
    return 0


def cmd_export_mesh(args) -> int:
    model, _ = _load_model(args.checkpoint)
    if args.subject:
        if not args.data:
            raise UserError("--subject requires --data")
        manifest = _load_manifest(args.data)
        _, vertices, _ = _load_subject(manifest, args.subject)
        mesh = SurfaceMesh(model.template.topology, vertices)
    else:
        mesh = model.template
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_surface(path, mesh)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="causalmesh",
        description="Causal shape modelling of surface meshes.",
        epilog=f"Set {CACHE_ENV_VAR} to relocate the artifact cache directory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key, e.g. training.epochs=40",
        )

    p = sub.add_parser("generate-data", help="sample a synthetic cohort to disk")
    with_config(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="fit the model and write a checkpoint")
    with_config(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one subject's mesh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--subject", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("intervene", help="sample a population under an intervention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--do", default="", help='assignments like "a=80 s=1"')
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("counterfact", help="subject-specific counterfactuals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--do", action="append", default=[], help="repeatable; empty list = null counterfactual")
    p.add_argument("--out")
    p.set_defaults(func=cmd_counterfact)

    p = sub.add_parser("evaluate", help="write evaluation reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", default="all", choices=("all",) + EVAL_SUITES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subject", help="subject for trajectory reports (default: first test subject)")
    p.add_argument("--n-per-setting", type=int, default=32)
    p.add_argument("--n-projection", type=int, default=5000)
    p.add_argument("--max-subjects", type=int, default=60)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-mesh", help="write the template or a subject mesh to PLY/OBJ")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subject")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UserError, ConfigError, MeshIOError, FileNotFoundError) as err:
        message = str(err).replace("\n", " ")
        print(f"error[user]: {message}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports everything
        message = f"{type(err).__name__}: {err}".replace("\n", " ")
        print(f"error[internal]: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
