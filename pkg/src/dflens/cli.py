"""Command-line interface.

Commands: train, generate, explain, eval, sweep-gamma, quantify-concepts,
dataset-dump. Every command resolves its configuration from built-in
defaults, an optional JSON config file, and explicit flags (flags win),
writes the resolved configuration beside its outputs as run_config.json,
and is fully reproducible from that file: same config and seed produce the
same bytes at any worker count.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import figures, render
from .data import COLORS, QUADRANTS, SHAPES, Scene, sample_scenes, TOKEN_NAMES
from .denoiser import (
    ACTIVATION_LAYERS,
    ArchSpec,
    DEFAULT_CAM_LAYER,
    Denoiser,
    generate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .diffusion import make_plan, make_schedule
from .evaluation import concept_relevance, ordering_baseline, perturbation_game
from .saliency import SimilarityConfig, df_cam, df_rise, generate_masks

SCHEMA_VERSION = 1
SEED_ENV_VAR = "DFLENS_SEED"


class ConfigError(Exception):
    pass


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


# (name, default, type, help) per command; None defaults resolve later.
_COMMON = [
    ("seed", None, int, "base random seed (falls back to $DFLENS_SEED, then 0)"),
]
_PLAN = [
    ("mode", "uniform", str, "time-step plan: uniform, exp_early or exp_latter"),
    ("inference_steps", 30, int, "number of inference steps l"),
    ("gamma", 60, int, "shift parameter of the exponential plans"),
]
_FIELDS = {
    "train": _COMMON
    + [
        ("steps", 2000, int, "number of optimizer steps"),
        ("lr", 2e-3, float, "Adam learning rate"),
        ("dataset_size", 256, int, "number of synthetic training images"),
        ("image_size", 32, int, "square image extent"),
        ("base_width", 16, int, "channel width of the first stage"),
        ("schedule", "linear", str, "noise schedule kind: linear or cosine"),
        ("timesteps", 1000, int, "length T of the diffusion chain"),
        ("model_seed", 0, int, "parameter initialization seed"),
    ],
    "generate": _COMMON
    + _PLAN
    + [
        ("checkpoint", None, str, "path to a trained checkpoint"),
        ("cond", "circle,red,tl", str, "condition as shape,color,quadrant or token ids"),
        ("save_steps", False, bool, "also write the per-step denoised previews"),
        ("upscale", 4, int, "integer factor for written PNGs"),
    ],
    "explain": _COMMON
    + _PLAN
    + [
        ("checkpoint", None, str, "path to a trained checkpoint"),
        ("cond", "circle,red,tl", str, "condition as shape,color,quadrant or token ids"),
        ("tool", "both", str, "df_rise, df_cam or both"),
        ("positions", None, str, "comma-separated plan positions (default 4 spread out)"),
        ("masks", 800, int, "number of random masks for df_rise"),
        ("keep_prob", 0.5, float, "expected kept fraction per mask"),
        ("mask_grid", None, str, "coarse mask grid as h,w (default full resolution)"),
        ("layer", None, str, "activation layer for df_cam"),
        ("metric", "structure", str, "similarity kind for df_rise"),
        ("alpha", 0.6, float, "overlay opacity"),
        ("upscale", 4, int, "integer factor for written PNGs"),
    ],
    "eval": _COMMON
    + _PLAN
    + [
        ("checkpoint", None, str, "path to a trained checkpoint"),
        ("cond", "circle,red,tl", str, "condition as shape,color,quadrant or token ids"),
        ("games", "deletion,insertion", str, "games to run"),
        ("orderings", "df_rise,df_cam,random,occlusion", str, "pixel orderings to score"),
        ("eval_seeds", 3, int, "number of evaluation seeds"),
        ("masks", 400, int, "number of random masks for the df_rise map"),
        ("keep_prob", 0.5, float, "expected kept fraction per mask"),
        ("metric", "structure", str, "similarity kind for the game scores"),
        ("fractions", 32, int, "curve resolution (equal fractions per game)"),
        ("position", None, int, "plan position to evaluate at (default middle)"),
        ("layer", None, str, "activation layer for df_cam"),
        ("occlusion_patch", 3, int, "patch extent for the occlusion baseline"),
    ],
    "sweep-gamma": _COMMON
    + [
        ("checkpoint", None, str, "path to a trained checkpoint"),
        ("cond", "circle,red,tl", str, "condition as shape,color,quadrant or token ids"),
        ("gammas", "0,30,60,90", str, "comma-separated gamma values"),
        ("mode", "exp_early", str, "exponential plan mode to sweep"),
        ("inference_steps", 30, int, "number of inference steps l"),
        ("upscale", 4, int, "integer factor for written PNGs"),
    ],
    "quantify-concepts": _COMMON
    + [
        ("checkpoint", None, str, "path to a trained checkpoint"),
        ("cond", "circle,red,tl", str, "condition as shape,color,quadrant or token ids"),
        ("modes", "uniform,exp_early,exp_latter", str, "plan modes to compare"),
        ("inference_steps", 30, int, "number of inference steps l"),
        ("gamma", 60, int, "shift parameter of the exponential plans"),
    ],
    "dataset-dump": _COMMON
    + [
        ("n", 36, int, "number of scenes"),
        ("image_size", 32, int, "square image extent"),
    ],
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflens",
        description="Saliency maps and time-step analysis for a toy conditional diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, fields in _FIELDS.items():
        p = sub.add_parser(command)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON config file (flags override it)")
        p.add_argument("--workers", type=int, default=None, help="worker threads")
        p.add_argument(
            "--deterministic",
            action=argparse.BooleanOptionalAction,
            default=True,
            help="fixed combine order (always on; flag kept for interface stability)",
        )
        for name, default, typ, help_text in fields:
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=help_text)
            else:
                p.add_argument(flag, type=typ, default=None, help=help_text)
    return parser


def _resolve_config(command: str, args) -> dict:
    resolved = {name: default for name, default, _, _ in _FIELDS[command]}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        file_command = loaded.pop("command", command)
        if file_command != command:
            raise ConfigError(
                f"config file was written by {file_command!r}, not {command!r}"
            )
        loaded.pop("schema_version", None)
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for name in resolved:
        value = getattr(args, name, None)
        if value is not None:
            resolved[name] = value
    if resolved.get("seed") is None:
        resolved["seed"] = _default_seed()
    return resolved


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_run_config(out: Path, command: str, cfg: dict):
    _write_json(out / "run_config.json", {"schema_version": SCHEMA_VERSION, "command": command, **cfg})


def _parse_cond(spec: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(spec).split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"condition needs 3 entries, got {spec!r}")
    if all(p.lstrip("-").isdigit() for p in parts):
        return tuple(int(p) for p in parts)
    shape, color, quadrant = parts
    try:
        return Scene(shape=shape, color=color, quadrant=quadrant).token_ids()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_int_list(spec, what: str) -> list[int]:
    if spec is None:
        return []
    if isinstance(spec, list):
        return [int(v) for v in spec]
    try:
        return [int(p) for p in str(spec).split(",") if p.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse {what}: {spec!r}") from exc


def _parse_name_list(spec, allowed, what: str) -> list[str]:
    names = [p.strip() for p in str(spec).split(",") if p.strip()]
    for name in names:
        if name not in allowed:
            raise ConfigError(f"unknown {what} {name!r} (allowed: {', '.join(allowed)})")
    if not names:
        raise ConfigError(f"no {what} selected")
    return names


def _load_model(cfg: dict) -> Denoiser:
    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("a --checkpoint is required")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _schedule_for(model: Denoiser):
    # inference commands rebuild the schedule the checkpoint was trained with
    return make_schedule(model.arch.schedule_kind, model.arch.train_timesteps)


def _resolve_layer(cfg: dict) -> str:
    layer = cfg.get("layer")
    if layer is None:
        print(
            f"using layer {DEFAULT_CAM_LAYER!r} "
            f"(available layers: {', '.join(ACTIVATION_LAYERS)})"
        )
        return DEFAULT_CAM_LAYER
    if layer not in ACTIVATION_LAYERS:
        raise ConfigError(
            f"unknown layer {layer!r}; available layers: {', '.join(ACTIVATION_LAYERS)}"
        )
    return layer


def _capture_latents(model, schedule, plan, cond, seed, positions):
    """Run generation once, keeping the latent at the requested plan positions."""
    wanted = set(positions)
    latents = {}

    def keep(i, t, x, trace):
        if i in wanted:
            latents[i] = (t, x.copy())

    final = generate(model, schedule, plan, cond, seed, callback=keep)
    return final, latents


def _cmd_train(out: Path, cfg: dict, args) -> int:
    if cfg["steps"] < 1:
        raise ConfigError("--steps must be at least 1")
    if cfg["schedule"] not in ("linear", "cosine"):
        raise ConfigError(f"unknown schedule {cfg['schedule']!r}")
    from .data import sample_dataset

    schedule = make_schedule(cfg["schedule"], cfg["timesteps"])
    dataset = sample_dataset(cfg["dataset_size"], cfg["seed"], cfg["image_size"])
    model = Denoiser(
        ArchSpec(
            image_size=cfg["image_size"],
            base_width=cfg["base_width"],
            schedule_kind=cfg["schedule"],
            train_timesteps=cfg["timesteps"],
        ),
        seed=cfg["model_seed"],
    )
    history = train(model, dataset, schedule, cfg["steps"], cfg["lr"], cfg["seed"])
    save_checkpoint(model, out / "checkpoint.dfl")
    _write_json(
        out / "loss_history.json",
        {
            "schema_version": SCHEMA_VERSION,
            "loss": history,
            "final_100_mean": float(np.mean(history[-100:])),
            "initial_100_mean": float(np.mean(history[:100])),
        },
    )
    figures.save_loss_curve(history, out / "loss_curve.png")
    print(f"trained {cfg['steps']} steps; final loss {history[-1]:.4f}")
    return 0


def _cmd_generate(out: Path, cfg: dict, args) -> int:
    model = _load_model(cfg)
    schedule = _schedule_for(model)
    plan = make_plan(schedule.total_steps, cfg["mode"], cfg["inference_steps"], cfg["gamma"])
    cond = _parse_cond(cfg["cond"])
    steps_dir = out / "steps"
    trace_rows = []

    def record(i, t, x, trace):
        from .diffusion import predict_x0

        trace_rows.append(
            {"position": i, "t": int(t), "latent_mean": float(x.mean()), "latent_std": float(x.std())}
        )
        if cfg["save_steps"]:
            steps_dir.mkdir(exist_ok=True)
            preview = predict_x0(x, t, trace.eps_hat.data, schedule)
            img = render.upscale(render.to_uint8_image(preview), cfg["upscale"])
            render.save_png(img, steps_dir / f"step_{i:03d}_t{t:04d}.png")

    final = generate(model, schedule, plan, cond, cfg["seed"], callback=record)
    render.save_png(
        render.upscale(render.to_uint8_image(final), cfg["upscale"]), out / "final.png"
    )
    _write_json(
        out / "trace.json",
        {
            "schema_version": SCHEMA_VERSION,
            "plan": plan.to_json(),
            "mode": plan.mode,
            "gamma": plan.gamma,
            "steps": trace_rows,
        },
    )
    print(f"generated {out / 'final.png'} over {len(plan.steps)} steps")
    return 0


def _cmd_explain(out: Path, cfg: dict, args) -> int:
    model = _load_model(cfg)
    schedule = _schedule_for(model)
    plan = make_plan(schedule.total_steps, cfg["mode"], cfg["inference_steps"], cfg["gamma"])
    cond = _parse_cond(cfg["cond"])
    tools = ("df_rise", "df_cam") if cfg["tool"] == "both" else (cfg["tool"],)
    for tool in tools:
        if tool not in ("df_rise", "df_cam"):
            raise ConfigError(f"unknown tool {tool!r}")
    layer = _resolve_layer(cfg) if "df_cam" in tools else None
    positions = _parse_int_list(cfg["positions"], "positions")
    if not positions:
        positions = sorted(set(np.linspace(0, len(plan.steps) - 1, 4).round().astype(int)))
    for p in positions:
        if not 0 <= p < len(plan.steps):
            raise ConfigError(f"plan position {p} outside [0, {len(plan.steps) - 1}]")
    grid = tuple(_parse_int_list(cfg["mask_grid"], "mask grid")) or None
    metric = SimilarityConfig(kind=cfg["metric"])

    _, latents = _capture_latents(model, schedule, plan, cond, cfg["seed"], positions)
    entries = []
    for pos in positions:
        t, r_t = latents[pos]
        for tool in tools:
            if tool == "df_rise":
                masks = generate_masks(
                    cfg["masks"],
                    r_t.shape[-2],
                    r_t.shape[-1],
                    cfg["keep_prob"],
                    cfg["seed"],
                    grid=grid,
                )
                smap = df_rise(
                    lambda x, t=t: model.predict(x, t, cond),
                    r_t,
                    masks,
                    metric,
                    step=t,
                    workers=args.workers,
                )
            else:
                smap = df_cam(model, r_t, t, cond, layer)
            stem = f"{tool}_pos{pos:02d}_t{t:04d}"
            overlay = render.render_heatmap(smap, r_t / max(1.0, np.abs(r_t).max()), cfg["alpha"])
            render.save_png(render.upscale(overlay, cfg["upscale"]), out / f"overlay_{stem}.png")
            _write_json(
                out / f"map_{stem}.json",
                {
                    "schema_version": SCHEMA_VERSION,
                    "tool": smap.tool,
                    "t": smap.step,
                    "position": pos,
                    "config": smap.config,
                    "values": smap.values.tolist(),
                },
            )
            entries.append({"tool": tool, "position": pos, "t": int(t), "file": f"map_{stem}.json"})
    _write_json(
        out / "report.json",
        {"schema_version": SCHEMA_VERSION, "plan": plan.to_json(), "maps": entries},
    )
    print(f"wrote {len(entries)} saliency maps to {out}")
    return 0


def _cmd_eval(out: Path, cfg: dict, args) -> int:
    model = _load_model(cfg)
    schedule = _schedule_for(model)
    plan = make_plan(schedule.total_steps, cfg["mode"], cfg["inference_steps"], cfg["gamma"])
    cond = _parse_cond(cfg["cond"])
    games = _parse_name_list(cfg["games"], ("deletion", "insertion"), "game")
    orderings = _parse_name_list(
        cfg["orderings"], ("df_rise", "df_cam", "random", "occlusion"), "ordering"
    )
    metric = SimilarityConfig(kind=cfg["metric"])
    layer = _resolve_layer(cfg) if "df_cam" in orderings else None
    position = cfg["position"]
    if position is None:
        position = len(plan.steps) // 2
    if not 0 <= position < len(plan.steps):
        raise ConfigError(f"plan position {position} outside [0, {len(plan.steps) - 1}]")
    if cfg["eval_seeds"] < 1:
        raise ConfigError("--eval-seeds must be at least 1")

    curves = {game: {name: [] for name in orderings} for game in games}
    for s in range(cfg["eval_seeds"]):
        gen_seed = cfg["seed"] + s
        _, latents = _capture_latents(model, schedule, plan, cond, gen_seed, [position])
        t, r_t = latents[position]
        predict = lambda x, t=t: model.predict(x, t, cond)
        h, w = r_t.shape[-2:]
        per_seed = {}
        if "df_rise" in orderings:
            masks = generate_masks(cfg["masks"], h, w, cfg["keep_prob"], s)
            per_seed["df_rise"] = df_rise(predict, r_t, masks, metric, step=t, workers=args.workers)
        if "df_cam" in orderings:
            per_seed["df_cam"] = df_cam(model, r_t, t, cond, layer)
        if "random" in orderings:
            per_seed["random"] = ordering_baseline("random", (h, w), seed=s)
        if "occlusion" in orderings:
            per_seed["occlusion"] = ordering_baseline(
                "occlusion", (h, w), predict=predict, r_t=r_t, patch_size=cfg["occlusion_patch"]
            )
        for game in games:
            for name in orderings:
                curve = perturbation_game(
                    game, per_seed[name], predict, r_t, cfg["fractions"], metric, label=name
                )
                curves[game][name].append((s, curve))

    summary_rows = []
    report_curves = {}
    for game in games:
        report_curves[game] = {}
        for name in orderings:
            entries = curves[game][name]
            aucs = [c.auc for _, c in entries]
            summary_rows.append(
                {
                    "game": game,
                    "ordering": name,
                    "auc_mean": float(np.mean(aucs)),
                    "auc_std": float(np.std(aucs)),
                    "n_seeds": len(aucs),
                }
            )
            report_curves[game][name] = [
                {
                    "seed": s,
                    "auc": c.auc,
                    "fractions": c.fractions.tolist(),
                    "scores": c.scores.tolist(),
                }
                for s, c in entries
            ]
        figures.save_game_curves(
            {name: [c for _, c in curves[game][name]] for name in orderings},
            game,
            out / f"curves_{game}.png",
        )

    with open(out / "auc_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["game", "ordering", "auc_mean", "auc_std", "n_seeds"])
        writer.writeheader()
        writer.writerows(summary_rows)
    _write_json(
        out / "report.json",
        {
            "schema_version": SCHEMA_VERSION,
            "plan": plan.to_json(),
            "position": position,
            "t": int(plan.steps[position]),
            "metric": cfg["metric"],
            "summary": summary_rows,
            "curves": report_curves,
            "seeds": list(range(cfg["eval_seeds"])),
        },
    )
    for row in summary_rows:
        print(
            f"{row['game']:<9} {row['ordering']:<9} auc {row['auc_mean']:.4f} "
            f"+/- {row['auc_std']:.4f} (n={row['n_seeds']})"
        )
    return 0


def _cmd_sweep_gamma(out: Path, cfg: dict, args) -> int:
    model = _load_model(cfg)
    schedule = _schedule_for(model)
    cond = _parse_cond(cfg["cond"])
    gammas = _parse_int_list(cfg["gammas"], "gammas")
    if not gammas:
        raise ConfigError("no gamma values given")
    if cfg["mode"] not in ("exp_early", "exp_latter"):
        raise ConfigError("sweep mode must be exp_early or exp_latter")
    images, rows = [], []
    for gamma in gammas:
        plan = make_plan(schedule.total_steps, cfg["mode"], cfg["inference_steps"], gamma)
        final = generate(model, schedule, plan, cond, cfg["seed"])
        render.save_png(
            render.upscale(render.to_uint8_image(final), cfg["upscale"]),
            out / f"image_gamma{gamma:03d}.png",
        )
        images.append(final)
        rows.append({"gamma": gamma, "plan": plan.to_json()})
    figures.save_image_strip(images, [f"gamma={g}" for g in gammas], out / "overview.png")
    _write_json(
        out / "sweep.json",
        {"schema_version": SCHEMA_VERSION, "mode": cfg["mode"], "runs": rows},
    )
    print(f"swept {len(gammas)} gamma values into {out}")
    return 0


def _cmd_quantify(out: Path, cfg: dict, args) -> int:
    model = _load_model(cfg)
    schedule = _schedule_for(model)
    cond = _parse_cond(cfg["cond"])
    modes = _parse_name_list(cfg["modes"], ("uniform", "exp_early", "exp_latter"), "mode")
    token_labels = [TOKEN_NAMES[t] if 0 <= t < len(TOKEN_NAMES) else f"tok{t}" for t in cond]
    profiles = []
    for mode in modes:
        plan = make_plan(schedule.total_steps, mode, cfg["inference_steps"], cfg["gamma"])
        profiles.append(concept_relevance(model, cond, schedule, plan, cfg["seed"]))
    _write_json(
        out / "relevance.json",
        {
            "schema_version": SCHEMA_VERSION,
            "note": "relevance is a cross-attention aggregate, a proxy score",
            "tokens": token_labels,
            "profiles": [
                {
                    "mode": p.mode,
                    "plan": [int(s) for s in p.steps],
                    "matrix": p.matrix.tolist(),
                    "totals": p.totals.tolist(),
                }
                for p in profiles
            ],
        },
    )
    with open(out / "relevance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "token", "total_relevance", "mean_per_step"])
        for p in profiles:
            for label, total, mean in zip(token_labels, p.totals, p.step_means()):
                writer.writerow([p.mode, label, f"{total:.6f}", f"{mean:.6f}"])
    figures.save_relevance_figure(profiles, token_labels, out / "relevance_curves.png")
    print(f"quantified {len(profiles)} sampling modes into {out}")
    return 0


def _cmd_dataset_dump(out: Path, cfg: dict, args) -> int:
    from .data import render as render_scene

    if cfg["n"] < 1:
        raise ConfigError("--n must be at least 1")
    scenes = sample_scenes(cfg["n"], cfg["seed"])
    images_dir = out / "images"
    images_dir.mkdir(exist_ok=True)
    manifest = []
    for i, scene in enumerate(scenes):
        img = render_scene(scene, cfg["image_size"])
        name = f"scene_{i:04d}.png"
        render.save_png(render.to_uint8_image(img), images_dir / name)
        manifest.append(
            {
                "file": f"images/{name}",
                "shape": scene.shape,
                "color": scene.color,
                "quadrant": scene.quadrant,
                "jitter_seed": scene.jitter_seed,
                "tokens": list(scene.token_ids()),
            }
        )
    _write_json(
        out / "manifest.json", {"schema_version": SCHEMA_VERSION, "scenes": manifest}
    )
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "generate": _cmd_generate,
    "explain": _cmd_explain,
    "eval": _cmd_eval,
    "sweep-gamma": _cmd_sweep_gamma,
    "quantify-concepts": _cmd_quantify,
    "dataset-dump": _cmd_dataset_dump,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_run_config(out, args.command, cfg)
        return _HANDLERS[args.command](out, cfg, args)
    except ConfigError as exc:
        print(f"dflens {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"dflens {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
