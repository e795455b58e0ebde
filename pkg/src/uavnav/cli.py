"""Single executable for the full pipeline: worlds to ablation tables.

Every subcommand reads one shared config file, derives its seeds from the
master seed, writes its outputs under --out, and drops a manifest recording
the effective config plus input checksums.  Exit codes: 0 success, 2 config
error, 3 missing prerequisite, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .camera import CameraPose, load_depth_image, render_depth, save_depth_image
from .collision_aware import collision_aware
from .config import ConfigError, RunConfig, default_config_text
from .env import collect_dataset, load_episode, save_episode
from .evaluation import (
    EvalAgent,
    export_trajectories,
    run_eval,
    save_report,
    sweep_temporal_interval,
    SweepReport,
    SweepRow,
)
from .geometry import Vec3, generate_world, load_world, save_world
from .policy import (
    AblationMode,
    RepresentationStack,
    StackMemory,
    TrainSetup,
    act,
    load_policy,
    save_policy,
    scripted_goal_policy,
    train_policy,
)
from .representation import (
    MemoryParams,
    VaeParams,
    normalize_batch,
    train_lstm,
    train_vae,
)
from .tensor import load_checkpoint, save_checkpoint
from .util import derived_rng, parallel_map, sha256_file

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_RUNTIME = 4


class PrerequisiteError(RuntimeError):
    pass


def _write_manifest(out_dir, command, cfg: RunConfig, inputs, outputs):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"command: {command}", f"seed: {cfg.seed}", "config:"]
    lines += ["  " + ln for ln in cfg.dump().splitlines()]
    lines.append("inputs:")
    for path in inputs:
        lines.append(f"  {os.path.relpath(path, out_dir)} {sha256_file(path)}")
    lines.append("outputs:")
    for path in outputs:
        lines.append(f"  {os.path.relpath(path, out_dir)}")
    with open(os.path.join(out_dir, f"manifest-{command}.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _require(path, what):
    if not os.path.exists(path):
        raise PrerequisiteError(f"{what} not found: {path}")
    return path


def _episode_dirs(episodes_dir):
    _require(episodes_dir, "episodes directory")
    dirs = sorted(
        os.path.join(episodes_dir, d)
        for d in os.listdir(episodes_dir)
        if d.startswith("ep")
    )
    if not dirs:
        raise PrerequisiteError(f"no episodes under {episodes_dir}")
    return dirs


def _load_frames(episodes_dir, cfg: RunConfig):
    """(per-episode raw arrays, per-episode ca arrays), both normalized."""
    ca_cfg = cfg.capre_config()
    raws, cas = [], []
    for d in _episode_dirs(episodes_dir):
        rec = load_episode(d)
        raw = normalize_batch(rec.frames)
        ca = normalize_batch([collision_aware(f, ca_cfg) for f in rec.frames])
        raws.append(raw)
        cas.append(ca)
    return raws, cas


def cmd_gen_world(cfg: RunConfig, args, out_dir):
    world = generate_world(cfg.world_config())
    path = os.path.join(out_dir, "world.txt")
    os.makedirs(out_dir, exist_ok=True)
    save_world(world, path)
    _write_manifest(out_dir, "gen-world", cfg, [], [path])
    print(f"wrote {path} ({len(world.obstacles)} obstacles)")
    return EXIT_OK


def cmd_render(cfg: RunConfig, args, out_dir):
    world_path = args.world or os.path.join(out_dir, "world.txt")
    world = load_world(_require(world_path, "world file"))
    intr = cfg.intrinsics()
    poses = []
    if args.pose:
        for p in args.pose:
            poses.append(CameraPose(Vec3(p[0], p[1], p[2]), p[3]))
    else:
        import math

        s, g = world.start, world.goal
        poses.append(CameraPose(s, math.atan2(g.y - s.y, g.x - s.x)))
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    outputs = []
    for i, pose in enumerate(poses):
        img = render_depth(world, pose, intr)
        path = os.path.join(frames_dir, f"frame_{i:06d}.pgm")
        save_depth_image(path, img, intr, pose)
        outputs.append(path)
    _write_manifest(out_dir, "render", cfg, [world_path], outputs)
    print(f"rendered {len(outputs)} frame(s) into {frames_dir}")
    return EXIT_OK


def _preprocess_one(job):
    src, dst, ca_cfg = job
    img, intr, pose = load_depth_image(src)
    out = collision_aware(img, ca_cfg)
    save_depth_image(dst, out, intr, pose)
    return dst


def cmd_preprocess(cfg: RunConfig, args, out_dir):
    src_dir = _require(args.input, "input directory")
    names = sorted(n for n in os.listdir(src_dir) if n.endswith(".pgm"))
    if not names:
        raise PrerequisiteError(f"no .pgm frames in {src_dir}")
    dst_dir = args.output or os.path.join(out_dir, "preprocessed")
    os.makedirs(dst_dir, exist_ok=True)
    ca_cfg = cfg.capre_config()
    jobs = [
        (os.path.join(src_dir, n), os.path.join(dst_dir, n), ca_cfg) for n in names
    ]
    outputs = parallel_map(_preprocess_one, jobs, workers=cfg.workers)
    _write_manifest(
        out_dir, "preprocess", cfg, [j[0] for j in jobs], outputs
    )
    print(f"preprocessed {len(outputs)} frame(s) into {dst_dir}")
    return EXIT_OK


def _policy_fn_from(params, stack_mode_rng):
    from .dynamics import Action

    def policy(obs, rng):
        action, _, _ = act(obs.vector(), params, rng)
        return Action.from_array(action)

    return policy


def cmd_collect(cfg: RunConfig, args, out_dir):
    intr = cfg.intrinsics()
    env_cfg = cfg.env_config()
    episodes = int(cfg.get("collect", "episodes"))
    cap = int(cfg.get("collect", "max_frames"))

    inputs = []
    if args.scripted:
        policy = scripted_goal_policy()
        memory_factory = None
    else:
        prefix = args.policy or os.path.join(out_dir, "policy_initial_VanillaRL")
        _require(prefix + ".bin", "stage-1 policy checkpoint")
        inputs += [prefix + ".bin", prefix + ".manifest"]
        params, mode = load_policy(prefix)
        vae = VaeParams.from_named_arrays(load_checkpoint(prefix + ".vae"))
        mem = None
        if mode.uses_memory:
            mem = MemoryParams.from_named_arrays(load_checkpoint(prefix + ".mem"))
        memory_factory = lambda: StackMemory(
            RepresentationStack(mode, vae, mem)
        )
        policy = _policy_fn_from(params, None)

    from .util import derived_seed

    worlds = [
        generate_world(cfg.world_config(seed=derived_seed(cfg.seed, 40, i)))
        for i in range(max(1, min(episodes, 20)))
    ]
    records = collect_dataset(
        policy,
        worlds,
        episodes=episodes,
        cap_frames=cap,
        cfg=env_cfg,
        intr=intr,
        memory_factory=memory_factory,
        master_seed=cfg.seed,
    )
    episodes_dir = os.path.join(out_dir, "episodes")
    outputs = []
    for i, rec in enumerate(records):
        d = os.path.join(episodes_dir, f"ep{i:04d}")
        save_episode(rec, d, intr)
        outputs.append(os.path.join(d, "steps.jsonl"))
    _write_manifest(out_dir, "collect", cfg, inputs, outputs)
    total = sum(len(r) for r in records)
    print(f"collected {len(records)} episodes / {total} frames into {episodes_dir}")
    return EXIT_OK


def cmd_train_vae(cfg: RunConfig, args, out_dir):
    episodes_dir = args.episodes or os.path.join(out_dir, "episodes")
    raws, cas = _load_frames(episodes_dir, cfg)
    raw = np.concatenate(raws)
    target = np.concatenate(cas) if args.supervision == "ca" else raw
    params, history = train_vae(
        (raw, target), cfg.vae_train_config(), already_normalized=True
    )
    prefix = os.path.join(out_dir, f"vae_{args.supervision}")
    save_checkpoint(prefix, params.named_arrays())
    log_path = os.path.join(out_dir, f"train_vae_{args.supervision}.csv")
    with open(log_path, "w") as f:
        f.write("epoch,loss,l_coll,l_kl\n")
        for row in history.epochs:
            f.write(f"{row['epoch']},{row['loss']!r},{row['l_coll']!r},{row['l_kl']!r}\n")
    _write_manifest(
        out_dir, "train-vae", cfg,
        [os.path.join(d, "steps.jsonl") for d in _episode_dirs(episodes_dir)],
        [prefix + ".bin", prefix + ".manifest", log_path],
    )
    print(f"trained VAE ({args.supervision}) -> {prefix}.bin")
    return EXIT_OK


def cmd_train_lstm(cfg: RunConfig, args, out_dir):
    episodes_dir = args.episodes or os.path.join(out_dir, "episodes")
    sup = args.supervision
    vae_prefix = args.vae or os.path.join(out_dir, f"vae_{sup}")
    _require(vae_prefix + ".bin", "VAE checkpoint")
    vae = VaeParams.from_named_arrays(load_checkpoint(vae_prefix))
    raws, cas = _load_frames(episodes_dir, cfg)
    pairs = list(zip(raws, cas if sup == "ca" else raws))
    t_val = int(cfg.get("lstm", "temporal_interval"))
    mem, history = train_lstm(
        pairs, vae, cfg.lstm_train_config(), interval=t_val,
        batch_windows=int(cfg.get("lstm", "batch_windows")),
    )
    prefix = os.path.join(out_dir, f"lstm_{sup}")
    save_checkpoint(prefix, mem.named_arrays())
    log_path = os.path.join(out_dir, f"train_lstm_{sup}.csv")
    with open(log_path, "w") as f:
        f.write("epoch,loss\n")
        for row in history.epochs:
            f.write(f"{row['epoch']},{row['loss']!r}\n")
    _write_manifest(
        out_dir, "train-lstm", cfg,
        [vae_prefix + ".bin"],
        [prefix + ".bin", prefix + ".manifest", log_path],
    )
    print(f"trained LSTM (T={t_val}, {sup}) -> {prefix}.bin")
    return EXIT_OK


def _mode_supervision(mode: AblationMode) -> str:
    return "ca" if mode.uses_collision_aware else "raw"


def _load_reprs_for(cfg, args, out_dir, mode):
    sup = _mode_supervision(mode)
    vae_prefix = args.vae or os.path.join(out_dir, f"vae_{sup}")
    _require(vae_prefix + ".bin", f"VAE checkpoint for {mode.value}")
    vae = VaeParams.from_named_arrays(load_checkpoint(vae_prefix))
    mem = None
    inputs = [vae_prefix + ".bin"]
    if mode.uses_memory:
        lstm_prefix = args.lstm or os.path.join(out_dir, f"lstm_{sup}")
        _require(lstm_prefix + ".bin", f"LSTM checkpoint for {mode.value}")
        mem = MemoryParams.from_named_arrays(load_checkpoint(lstm_prefix))
        inputs.append(lstm_prefix + ".bin")
    return vae, mem, inputs


def cmd_train_policy(cfg: RunConfig, args, out_dir):
    mode = AblationMode.parse(args.mode)
    setup = TrainSetup(
        world_cfg=cfg.world_config(),
        env_cfg=cfg.env_config(),
        intr=cfg.intrinsics(),
    )
    inputs = []
    if args.stage == "final":
        vae, mem, inputs = _load_reprs_for(cfg, args, out_dir, mode)
    else:
        # Randomly initialized, fixed representations for the data-collection
        # policy; saved alongside so collect/eval reuse the exact arrays.
        seed = cfg.ppo_config().seed
        vae = VaeParams.create(
            derived_rng(seed, 32), setup.intr.height, setup.intr.width
        )
        mem = MemoryParams.create(derived_rng(seed, 33)) if mode.uses_memory else None
    params, history = train_policy(
        args.stage, mode, setup, cfg.ppo_config(), vae=vae, mem=mem,
        log=(lambda m: print(
            f"update {m['update']}: steps {m['steps']} "
            f"return {m['mean_return']:.2f} arrive {m['arrive_rate']:.2f}"
        )) if args.verbose else None,
    )
    prefix = os.path.join(out_dir, f"policy_{args.stage}_{mode.value}")
    os.makedirs(out_dir, exist_ok=True)
    save_policy(prefix, params, mode)
    save_checkpoint(prefix + ".vae", vae.named_arrays())
    if mem is not None:
        save_checkpoint(prefix + ".mem", mem.named_arrays())
    log_path = prefix + ".train.csv"
    with open(log_path, "w") as f:
        f.write("update,steps,mean_return,arrive_rate,clip_fraction,approx_kl\n")
        for m in history:
            f.write(
                f"{m['update']},{m['steps']},{m['mean_return']!r},"
                f"{m['arrive_rate']!r},{m['clip_fraction']!r},{m['approx_kl']!r}\n"
            )
    _write_manifest(
        out_dir, "train-policy", cfg, inputs,
        [prefix + ".bin", prefix + ".manifest", log_path],
    )
    print(f"trained policy ({args.stage}, {mode.value}) -> {prefix}.bin")
    return EXIT_OK


def _agent_from_prefix(prefix):
    params, mode = load_policy(prefix)
    vae = VaeParams.from_named_arrays(load_checkpoint(prefix + ".vae"))
    mem = None
    if mode.uses_memory:
        mem = MemoryParams.from_named_arrays(load_checkpoint(prefix + ".mem"))
    return EvalAgent(policy=params, mode=mode, vae=vae, mem=mem)


def cmd_eval(cfg: RunConfig, args, out_dir):
    prefix = args.policy or os.path.join(out_dir, "policy_final_CaMeRL")
    _require(prefix + ".bin", "policy checkpoint")
    agent = _agent_from_prefix(prefix)
    report = run_eval(
        agent,
        cfg.protocol(),
        cfg.world_config(),
        cfg.env_config(),
        cfg.intrinsics(),
        workers=cfg.workers,
    )
    eval_dir = os.path.join(out_dir, f"eval_{agent.mode.value}")
    save_report(report, eval_dir)
    export_trajectories(report, os.path.join(eval_dir, "trajectories"))
    _write_manifest(
        out_dir, "eval", cfg, [prefix + ".bin"],
        [os.path.join(eval_dir, "report.csv"), os.path.join(eval_dir, "report.txt")],
    )
    print(
        f"eval {agent.mode.value}: success {report.success_rate:.3f} "
        f"avg speed {report.average_speed:.3f} -> {eval_dir}"
    )
    return EXIT_OK


def cmd_sweep_t(cfg: RunConfig, args, out_dir):
    episodes_dir = args.episodes or os.path.join(out_dir, "episodes")
    vae_prefix = args.vae or os.path.join(out_dir, "vae_ca")
    _require(vae_prefix + ".bin", "VAE checkpoint")
    vae = VaeParams.from_named_arrays(load_checkpoint(vae_prefix))
    raws, cas = _load_frames(episodes_dir, cfg)
    setup = TrainSetup(
        world_cfg=cfg.world_config(),
        env_cfg=cfg.env_config(),
        intr=cfg.intrinsics(),
    )

    def train_fn(mem):
        params, _ = train_policy(
            "final", AblationMode.CAME, setup, cfg.ppo_config(), vae=vae, mem=mem
        )
        return params

    t_values = [int(t) for t in args.t_values.split()]
    report = sweep_temporal_interval(
        t_values,
        list(zip(raws, cas)),
        vae,
        cfg.lstm_train_config(),
        train_fn,
        cfg.protocol(),
        cfg.world_config(),
        cfg.env_config(),
        cfg.intrinsics(),
        workers=cfg.workers,
    )
    csv_path = os.path.join(out_dir, "sweep_t.csv")
    txt_path = os.path.join(out_dir, "sweep_t.txt")
    with open(csv_path, "w") as f:
        f.write(report.to_csv_text())
    with open(txt_path, "w") as f:
        f.write(report.to_text_table())
    _write_manifest(out_dir, "sweep-t", cfg, [vae_prefix + ".bin"],
                    [csv_path, txt_path])
    print(report.to_text_table())
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args, out_dir):
    """Run all four ablation modes end to end and emit one comparison table."""
    episodes_dir = args.episodes or os.path.join(out_dir, "episodes")
    raws, cas = _load_frames(episodes_dir, cfg)
    raw_all = np.concatenate(raws)
    ca_all = np.concatenate(cas)
    setup = TrainSetup(
        world_cfg=cfg.world_config(),
        env_cfg=cfg.env_config(),
        intr=cfg.intrinsics(),
    )
    t_val = int(cfg.get("lstm", "temporal_interval"))

    vaes = {}
    for sup, target in (("ca", ca_all), ("raw", raw_all)):
        vaes[sup], _ = train_vae(
            (raw_all, target), cfg.vae_train_config(), already_normalized=True
        )
        save_checkpoint(os.path.join(out_dir, f"vae_{sup}"),
                        vaes[sup].named_arrays())
    mems = {}
    for sup in ("ca", "raw"):
        pairs = list(zip(raws, cas if sup == "ca" else raws))
        mems[sup], _ = train_lstm(
            pairs, vaes[sup], cfg.lstm_train_config(), interval=t_val,
            batch_windows=int(cfg.get("lstm", "batch_windows")),
        )
        save_checkpoint(os.path.join(out_dir, f"lstm_{sup}"),
                        mems[sup].named_arrays())

    rows = []
    outputs = []
    for mode in AblationMode:
        sup = _mode_supervision(mode)
        vae = vaes[sup]
        mem = mems[sup] if mode.uses_memory else None
        params, _ = train_policy(
            "final", mode, setup, cfg.ppo_config(), vae=vae, mem=mem
        )
        prefix = os.path.join(out_dir, f"policy_final_{mode.value}")
        save_policy(prefix, params, mode)
        save_checkpoint(prefix + ".vae", vae.named_arrays())
        if mem is not None:
            save_checkpoint(prefix + ".mem", mem.named_arrays())
        agent = EvalAgent(policy=params, mode=mode, vae=vae, mem=mem)
        report = run_eval(
            agent, cfg.protocol(), cfg.world_config(), cfg.env_config(),
            cfg.intrinsics(), workers=cfg.workers,
        )
        eval_dir = os.path.join(out_dir, f"eval_{mode.value}")
        save_report(report, eval_dir)
        outputs.append(os.path.join(eval_dir, "report.csv"))
        rows.append((mode.value, report.success_rate, report.average_speed))
        print(f"{mode.value}: success {report.success_rate:.3f} "
              f"avg speed {report.average_speed:.3f}")

    table_path = os.path.join(out_dir, "ablation.csv")
    with open(table_path, "w") as f:
        f.write("mode,success_rate,average_speed\n")
        for name, sr, sp in rows:
            f.write(f"{name},{sr!r},{sp!r}\n")
    txt_path = os.path.join(out_dir, "ablation.txt")
    with open(txt_path, "w") as f:
        header = f"{'':>14}" + "".join(f"{name:>12}" for name, _, _ in rows)
        sr_line = f"{'success rate':>14}" + "".join(
            f"{sr:>12.3f}" for _, sr, _ in rows
        )
        sp_line = f"{'avg speed':>14}" + "".join(
            f"{sp:>12.3f}" for _, _, sp in rows
        )
        f.write(header + "\n" + sr_line + "\n" + sp_line + "\n")
    _write_manifest(out_dir, "ablate", cfg,
                    [os.path.join(d, "steps.jsonl")
                     for d in _episode_dirs(episodes_dir)],
                    outputs + [table_path, txt_path])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavnav",
        description="Collision-aware, memory-enhanced UAV navigation benchmark",
    )
    parser.add_argument("--config", help="path to the INI config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--workers", type=int, help="bound internal parallelism")
    parser.add_argument("--out", help="output directory (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-world", help="generate and save a world")

    p = sub.add_parser("render", help="render depth frames from a world")
    p.add_argument("--world", help="world file (default <out>/world.txt)")
    p.add_argument("--pose", nargs=4, type=float, action="append",
                   metavar=("X", "Y", "Z", "YAW"))

    p = sub.add_parser("preprocess", help="batch collision-aware preprocessing")
    p.add_argument("--input", required=True, help="directory of raw .pgm frames")
    p.add_argument("--output", help="destination directory")

    p = sub.add_parser("collect", help="roll out the stage-1 policy, store episodes")
    p.add_argument("--policy", help="stage-1 policy checkpoint prefix")
    p.add_argument("--scripted", action="store_true",
                   help="use the built-in scripted goal seeker instead")

    p = sub.add_parser("train-vae", help="train the depth VAE")
    p.add_argument("--episodes", help="episodes directory")
    p.add_argument("--supervision", choices=("ca", "raw"), default="ca")

    p = sub.add_parser("train-lstm", help="train the temporal memory module")
    p.add_argument("--episodes", help="episodes directory")
    p.add_argument("--vae", help="VAE checkpoint prefix")
    p.add_argument("--supervision", choices=("ca", "raw"), default="ca")

    p = sub.add_parser("train-policy", help="PPO training")
    p.add_argument("--stage", choices=("initial", "final"), required=True)
    p.add_argument("--mode", default="VanillaRL")
    p.add_argument("--vae", help="VAE checkpoint prefix (stage final)")
    p.add_argument("--lstm", help="LSTM checkpoint prefix (stage final)")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", help="run the multi-seed evaluation protocol")
    p.add_argument("--policy", help="policy checkpoint prefix")

    p = sub.add_parser("sweep-t", help="temporal-interval sweep")
    p.add_argument("--episodes", help="episodes directory")
    p.add_argument("--vae", help="collision-aware VAE checkpoint prefix")
    p.add_argument("--t-values", default="1 5 10 15 20 30")

    p = sub.add_parser("ablate", help="train and evaluate all four modes")
    p.add_argument("--episodes", help="episodes directory")

    return parser


_HANDLERS = {
    "gen-world": cmd_gen_world,
    "render": cmd_render,
    "preprocess": cmd_preprocess,
    "collect": cmd_collect,
    "train-vae": cmd_train_vae,
    "train-lstm": cmd_train_lstm,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "sweep-t": cmd_sweep_t,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("run", "seed", int(args.seed))
        if args.workers is not None:
            cfg.set("run", "workers", int(args.workers))
        if args.out is not None:
            cfg.set("run", "out", args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _HANDLERS[args.command](cfg, args, cfg.out_dir)
    except PrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - report and map to exit code
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
