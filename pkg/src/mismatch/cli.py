"""``mismatch`` command line: configs in, CSV/JSON/SVG artifacts out.

Exit codes: 0 success, 1 a unit failed, 2 bad config or arguments,
3 missing input file.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import adversarial as adv
from . import data as ds
from . import diagnostics as dg
from . import model as dm
from .config import ConfigError, ExperimentConfig, dump_config, load_config, to_tree
from .planner import CartpoleReward
from .records import RecordStore, default_output_root, parallel_map, read_csv, write_csv, write_manifest

EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


class MissingInput(Exception):
    pass


def _need(path) -> Path:
    if path is None:
        raise ConfigError("", "a required input path is not set")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"input not found: {p}")
    return p


def _checkpoints(paths) -> list[tuple[str, dm.DynamicsModel]]:
    files: list[Path] = []
    for item in paths:
        p = _need(item)
        files.extend(sorted(p.glob("**/*.ckpt")) if p.is_dir() else [p])
    return [(f.stem, dm.load_checkpoint(f)) for f in files]


class Run:
    """Resolved config plus the output directory of one invocation."""

    def __init__(self, ctx: click.Context, name: str):
        opts = ctx.obj
        self.cfg: ExperimentConfig = load_config(opts["config"], opts["overrides"])
        if opts["seed"] is not None:
            self.cfg.seed = opts["seed"]
        root = Path(opts["out"] or self.cfg.output_dir or default_output_root() / name)
        self.out = root
        self.out.mkdir(parents=True, exist_ok=True)
        self.workers = opts["workers"]
        self.inputs: list[Path] = []

    def finish(self, seeds=None):
        dump_config(self.cfg, self.out / "config.yaml")
        write_manifest(self.out, to_tree(self.cfg), seeds if seeds is not None else [self.cfg.seed], self.inputs)


@click.group()
@click.option("--config", "config", type=click.Path(), default=None, help="YAML experiment config.")
@click.option("--set", "overrides", multiple=True, help="Dot-path override, e.g. model.width=64.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Master seed.")
@click.option("--workers", type=int, default=1, show_default=True, help="Worker processes.")
@click.pass_context
def main(ctx, config, overrides, out, seed, workers):
    """Objective-mismatch diagnostics for model-based RL on cartpole."""
    if workers < 1:
        raise click.BadParameter("must be >= 1", param_hint="--workers")
    ctx.obj = dict(config=config, overrides=list(overrides), out=out, seed=seed, workers=workers)


@main.command("gen-data")
@click.argument("kind", type=click.Choice(ds.PROVENANCES))
@click.option("--slices", type=int, default=None)
@click.option("--n", "n", type=int, default=None, help="Samples, trials or rollouts depending on kind.")
@click.pass_context
def gen_data(ctx, kind, slices, n):
    """Generate a dataset CSV."""
    run = Run(ctx, f"data-{kind}")
    cfg, d = run.cfg, run.cfg.data
    if kind == "grid":
        out = ds.generate_grid(slices_per_dim=slices or d.slices, params=cfg.env)
    elif kind == "sampled":
        out = ds.generate_sampled(n=n or d.n_samples, seed=cfg.seed, params=cfg.env)
    elif kind == "on-policy":
        out = ds.collect_on_policy(ds.RandomPolicy(cfg.seed), n or d.n_trials, d.horizon, cfg.seed, cfg.env)
    elif kind == "expert":
        out = ds.collect_expert(d.horizon, n or d.n_trials, d.expert_threshold, cfg.seed, cfg.env, cfg.planner)
    elif kind == "babble":
        out = ds.collect_babble(n or d.babble_rollouts, d.babble_horizon, cfg.seed, cfg.env)
    else:
        expert_path = _need(d.expert)
        run.inputs.append(expert_path)
        spec = ds.DistanceFilterSpec(ds.load(expert_path, "expert"), d.epsilon, n or d.S, d.pool_size, cfg.seed,
                                     d.metric)
        out = ds.filter_by_distance(spec, params=cfg.env)
    ds.save(out, run.out / f"{kind}.csv")
    run.finish()
    click.echo(f"{len(out)} rows -> {run.out / f'{kind}.csv'}")


@main.command()
@click.argument("dataset", type=click.Path())
@click.option("--validation", type=click.Path(), default=None)
@click.option("--weighting", type=click.Choice(["none", "distance", "reward"]), default="none")
@click.pass_context
def train(ctx, dataset, validation, weighting):
    """Train a dynamics model on a dataset CSV."""
    run = Run(ctx, "train")
    train_set = ds.load(_need(dataset))
    run.inputs.append(Path(dataset))
    val = None
    if validation:
        val = ds.load(_need(validation))
        run.inputs.append(Path(validation))
    model = dm.DynamicsModel(run.cfg.model)
    hist = dm.train(model, train_set, val, weights=dm.WeightSpec(weighting), reward_fn=CartpoleReward(run.cfg.env))
    dm.save_checkpoint(model, run.out / "model.ckpt")
    write_csv(run.out / "history.csv", ["epoch", "train_loss", "val_loss"],
              ([e, tl, hist.val_loss[i] if hist.val_loss else ""] for i, (e, tl) in
               enumerate(zip(hist.epochs, hist.train_loss))))
    run.finish()
    click.echo(f"model -> {run.out / 'model.ckpt'}")


@main.command("run-pets")
@click.option("--trials", type=int, default=None)
@click.pass_context
def run_pets(ctx, trials):
    """Run the PETS loop for every configured seed."""
    run = Run(ctx, "pets")
    p = run.cfg.pets
    n_trials = trials or p.n_trials
    store = RecordStore(run.out / "records.jsonl", to_tree(run.cfg))
    seeds = [int(s) for s in p.seeds]
    todo = [s for s in seeds if f"pets:{s}" not in store]
    fn = _PetsUnit(run.cfg, n_trials, run.out)
    for s, recs in zip(todo, parallel_map(fn, todo, run.workers)):
        store.append(f"pets:{s}", recs)
    rows = []
    for s in seeds:
        for r in store.get(f"pets:{s}"):
            rec = dg.ExperimentRecord.from_dict(r)
            rows.append([s, rec.trial_index, rec.model_id, rec.mean_reward, rec.ll_per_dataset["heldout"],
                         rec.val_nll])
    write_csv(run.out / "pets.csv", dg.PETS_HEADER, rows)
    run.finish(seeds)
    click.echo(f"{len(rows)} records -> {run.out / 'pets.csv'}")


class _PetsUnit:
    def __init__(self, cfg, n_trials, out):
        self.cfg, self.n_trials, self.out = cfg, n_trials, out

    def __call__(self, seed):
        c = self.cfg
        result = dg.run_pets(self.n_trials, c.env, c.model, c.planner, c.pets.initial_random_episodes, seed=seed,
                             horizon=c.pets.horizon, train_fraction=c.pets.train_fraction,
                             training_type=c.pets.training_type,
                             out_dir=self.out / "checkpoints")
        ds.save(result.dataset, self.out / "data" / f"seed{seed}.csv")
        return [r.to_dict() for r in result.records]


@main.command("sweep-llr")
@click.option("--batching", type=click.Choice(["random", "trajectory"]), default="random", show_default=True)
@click.pass_context
def sweep_llr(ctx, batching):
    """LL-vs-reward correlation over checkpoints and datasets."""
    run = Run(ctx, f"sweep-{batching}")
    sw = run.cfg.sweep
    checkpoints = _checkpoints(sw.checkpoints)
    datasets = {}
    for tag, path in sw.datasets.items():
        datasets[tag] = ds.load(_need(path), tag if tag in ds.PROVENANCES else "sampled")
        run.inputs.append(Path(path))
    rewards = None
    if sw.rewards:
        rewards = {r["model_id"]: [float(r["reward"])] for r in read_csv(_need(sw.rewards))}
        run.inputs.append(Path(sw.rewards))
    reports, _, rows = dg.ll_reward_sweep(checkpoints, datasets, run.cfg.env, run.cfg.planner, sw.n_eval, batching,
                                          run.cfg.seed, rewards, run.workers)
    write_csv(run.out / "sweep.csv", dg.SWEEP_HEADER, rows)
    write_csv(run.out / "correlation.csv", ["dataset", "n", "pearson_rho"],
              ([t, r.n, r.pearson_rho] for t, r in reports.items()))
    run.finish()
    for t, r in reports.items():
        click.echo(f"{t}: rho={r.pearson_rho:.4f} (n={r.n})")


@main.command("epoch-curve")
@click.pass_context
def epoch_curve(ctx):
    """Per-epoch validation loss and controller reward."""
    run = Run(ctx, "epoch-curve")
    ec = run.cfg.epoch_curve
    train_set = ds.load(_need(ec.train))
    vals = {t: ds.load(_need(p)) for t, p in ec.validation.items()}
    run.inputs += [Path(ec.train)] + [Path(p) for p in ec.validation.values()]
    rows, _ = dg.epoch_reward_curve(run.cfg.model, train_set, vals, run.cfg.env, run.cfg.planner, ec.eval_every,
                                    ec.n_eval, run.cfg.seed, ec.epochs)
    header, body = dg.epoch_curve_table(rows, list(vals))
    write_csv(run.out / "epoch_curve.csv", header, body)
    run.finish()
    click.echo(f"{len(body)} rows -> {run.out / 'epoch_curve.csv'}")


@main.command()
@click.pass_context
def attack(ctx):
    """CMA-ES attack on a checkpoint's output layer."""
    run = Run(ctx, "attack")
    a = run.cfg.attack_inputs
    model = dm.load_checkpoint(_need(a.checkpoint))
    val = ds.load(_need(a.validation), "on-policy")
    run.inputs += [Path(a.checkpoint), Path(a.validation)]
    cfg = adv.AttackConfig(**{**run.cfg.attack.to_dict(), "workers": run.workers})
    result = adv.attack(model, val, run.cfg.env, run.cfg.planner, cfg, log_path=run.out / "convergence.csv")
    dm.save_checkpoint(result.model, run.out / "attacked.ckpt")
    summary = dict(baseline_reward=result.baseline_reward, baseline_ll=result.baseline_ll,
                   final_reward=result.final_reward, final_ll=result.final_ll, success=result.success,
                   evaluations=result.evaluations)
    (run.out / "attack.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    run.finish()
    click.echo(json.dumps(summary, sort_keys=True))


@main.command()
@click.option("--reweight", type=click.Choice(["on", "off", "reward"]), default="on", show_default=True)
@click.pass_context
def heatmap(ctx, reweight):
    """Reward over the (S, epsilon) grid of distance-filtered training sets."""
    run = Run(ctx, f"heatmap-{reweight}")
    h = run.cfg.heatmap
    expert_path = _need(h.expert)
    run.inputs.append(expert_path)
    pool = ds.DistancePool.build(ds.load(expert_path, "expert"), pool_size=h.pool_size, seed=run.cfg.seed,
                                 params=run.cfg.env)
    arm = {"on": "distance", "off": "none", "reward": "reward"}[reweight]
    store = RecordStore(run.out / "records.jsonl", to_tree(run.cfg))
    cells = dg.reweight_heatmap(h.S, h.epsilon, pool, arm, h.n_seeds, run.cfg.model, run.cfg.planner, run.cfg.env,
                                run.cfg.seed, h.n_eval, run.workers, store)
    write_csv(run.out / "heatmap.csv", dg.HEATMAP_HEADER, dg.heatmap_rows(cells))
    run.finish(list(range(h.n_seeds)))
    click.echo(f"{len(cells)} cells -> {run.out / 'heatmap.csv'}")


@main.command("babble-study")
@click.pass_context
def babble_study(ctx):
    """PETS learning speed with extra irrelevant transitions."""
    run = Run(ctx, "babble")
    b = run.cfg.babble
    store = RecordStore(run.out / "records.jsonl", to_tree(run.cfg))
    curves = dg.babble_study(b.extra_transitions, b.n_seeds, b.n_trials, run.cfg.env, run.cfg.model,
                             run.cfg.planner, run.cfg.seed, b.horizon, run.workers, store)
    rows = [[c, k, t, r] for c, per_seed in curves.items() for k, curve in enumerate(per_seed)
            for t, r in enumerate(curve)]
    write_csv(run.out / "babble.csv", ["extra_transitions", "seed_index", "trial", "reward"], rows)
    run.finish(list(range(b.n_seeds)))
    click.echo(f"{len(rows)} rows -> {run.out / 'babble.csv'}")


@main.command("goal-gen")
@click.pass_context
def goal_gen(ctx):
    """Reward and visited-x histograms for shifted goals."""
    run = Run(ctx, "goal-gen")
    g = run.cfg.goal
    rows = dg.goal_generalization(_checkpoints(g.checkpoints), g.goals, run.cfg.env, run.cfg.planner, g.n_eval,
                                  run.cfg.seed, run.workers)
    header, body = dg.goal_rows(rows)
    write_csv(run.out / "goal.csv", header, body)
    run.finish()
    click.echo(f"{len(body)} rows -> {run.out / 'goal.csv'}")


@main.command("compare-plans")
@click.pass_context
def compare_plans(ctx):
    """Plans of two models from every state of an expert episode."""
    run = Run(ctx, "compare-plans")
    c = run.cfg.compare
    a = dm.load_checkpoint(_need(c.checkpoint_a))
    b = dm.load_checkpoint(_need(c.checkpoint_b))
    expert = ds.load(_need(c.expert), "expert")
    run.inputs += [Path(c.checkpoint_a), Path(c.checkpoint_b), Path(c.expert)]
    states = expert.subset(expert.episode_indices()[0]).s if expert.has_episodes else expert.s
    header, body = dg.compare_plans_table(dg.compare_plans(a, b, states, run.cfg.planner, run.cfg.env, run.cfg.seed))
    write_csv(run.out / "compare_plans.csv", header, body)
    run.finish()
    click.echo(f"{len(body)} rows -> {run.out / 'compare_plans.csv'}")


@main.command()
@click.argument("csv_path", type=click.Path())
@click.option("--kind", type=click.Choice(["auto", "scatter", "line", "heatmap"]), default="auto")
@click.option("--x", "x", default=None)
@click.option("--y", "y", default=None)
@click.option("--output", type=click.Path(), default=None)
def plot(csv_path, kind, x, y, output):
    """Render a result CSV to SVG."""
    from .plotting import render

    path = _need(csv_path)
    target = render(path, kind=kind, x=x, y=y, output=output)
    click.echo(f"-> {target}")


def run(argv=None) -> int:
    try:
        main.main(args=argv, prog_name="mismatch", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_FAILED
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_MISSING
    except Exception as exc:  # any failed unit
        click.echo(f"error: {exc}", err=True)
        return EXIT_FAILED
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
