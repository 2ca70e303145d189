"""Training loop, evaluation and metric export.

Per iteration every actor plays ``n_evals`` episodes in its own replica of
the network (it steers all DUs of that replica, but only its home DU's
transitions are stored), the traffic forecaster supplies the upcoming
per-DU load, and the learner runs a round of critic and policy updates.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocation import realize_allocation
from .config import SimConfig
from .env import SlicingEnv
from .errors import NumericalFailure
from .nn import save_checkpoint
from .predictor import LoadScaler, Predictor, fit_predictor
from .sac import ConvergenceMonitor, DistributedReplay, SacAgent, encode_state, reward

log = logging.getLogger(__name__)

RETURNS_HEADER = ("episode", "return", "mode", "gamma")
THROUGHPUT_HEADER = ("user", "slice", "mbps")
VIOLATION_HEADER = ("slice", "std", "mode")
TRAINING_LOG_HEADER = ("iteration", "actor", "policy_loss", "critic_loss", "mean_reward")


@dataclass
class EpisodeStats:
    returns: np.ndarray  # (R,) discounted return of each replica's home DU
    mean_reward: np.ndarray  # (R,)
    transitions: int = 0


@dataclass
class EvalStats:
    mean_return: float = float("nan")
    returns: list[float] = field(default_factory=list)
    mean_reward: float = float("nan")
    throughput: list[tuple[int, int, float]] = field(default_factory=list)  # (user, slice, Mbps)
    violation_std: list[float] = field(default_factory=list)  # per slice, Mbps
    violation_rate: list[float] = field(default_factory=list)  # share of samples beyond margin


@dataclass
class RunMetrics:
    mode: str
    gamma: float
    slice_names: list[str]
    returns: list[tuple[int, int, int, float]] = field(default_factory=list)  # (episode, iteration, actor, R)
    train_log: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    evaluation: EvalStats = field(default_factory=EvalStats)
    iterations_run: int = 0
    converged: bool = False
    predictor_calls: int = 0
    buffer_sizes: list[int] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def final_return(self, last: int = 100) -> float:
        vals = [r[3] for r in self.returns[-last:]]
        return float(np.mean(vals)) if vals else float("nan")


def mode_name(prediction: bool) -> str:
    return "prediction" if prediction else "no_prediction"


class EpisodeRunner:
    """Plays lockstep episodes over the replicas of one environment."""

    def __init__(self, cfg: SimConfig, env: SlicingEnv, predictor: Predictor | None):
        self.cfg = cfg
        self.env = env
        self.predictor = predictor
        self.scaler = LoadScaler.from_config(cfg, env.n_dus)
        self.look_back = cfg.predictor.look_back
        self.predictor_calls = 0

    def _observe(self, report, prev_rbs, history) -> np.ndarray:
        st = self.env.state
        if self.predictor is not None:
            counts, loads = self.predictor.predict_batch(np.stack(history, axis=1))
            self.predictor_calls += 1
        else:
            counts, loads = st.counts, st.loads
        return encode_state(report.qos, counts, loads, prev_rbs, self.env.targets, self.env.n_users,
                            self.scaler.load_max, self.env.num_rbs)

    def _start(self):
        env = self.env
        st = env.reset()
        history = [self.scaler.encode(st.counts, st.loads)]
        for _ in range(self.look_back - 1):
            st = env.advance()
            history.append(self.scaler.encode(st.counts, st.loads))
        prev = env.equal_split()
        report = env.evaluate(env.schedule(prev))
        return report, prev, history

    def run(self, policy, gamma: float, on_step=None):
        """Play one episode.

        ``policy(states (R, M, S)) -> raw (R, M, L)``. ``on_step`` receives
        (s, raw, rewards (R, M), s2, report) after every step.
        Returns discounted returns and mean rewards, both (R, M).
        """
        env = self.env
        report, prev, history = self._start()
        s = self._observe(report, prev, history)
        disc = np.zeros((env.n_replicas, env.n_dus))
        total = np.zeros_like(disc)
        for t in range(self.cfg.episode_len):
            raw = policy(s)
            rbs = realize_allocation(raw, env.num_rbs)
            report = env.step(rbs)
            st = env.state
            history = history[1:] + [self.scaler.encode(st.counts, st.loads)]
            r = reward(report.qos, env.targets)
            s2 = self._observe(report, rbs, history)
            if on_step is not None:
                on_step(s, raw, r, s2, report)
            disc += gamma ** t * r
            total += r
            s = s2
        return disc, total / self.cfg.episode_len


def home_du(actor: int, n_dus: int) -> int:
    return actor % n_dus


def collect_episode(agent: SacAgent, runner: EpisodeRunner, replay: DistributedReplay,
                    rng: np.random.Generator) -> EpisodeStats:
    """Actor i steers replica i; only its home DU's transitions enter its buffer."""
    n_act = agent.n_actors
    homes = np.array([home_du(i, runner.env.n_dus) for i in range(n_act)])
    ids = np.arange(n_act)
    stored = 0

    def policy(states):
        raw, _ = agent.act(states, rng)
        return raw

    def store(s, raw, r, s2, report):
        nonlocal stored
        for i in range(n_act):
            h = homes[i]
            replay.add(i, s[i, h], raw[i, h], r[i, h], s2[i, h], False)
        stored += n_act

    disc, mean_r = runner.run(policy, agent.hyper.gamma, store)
    return EpisodeStats(disc[ids, homes], mean_r[ids, homes], stored)


def build_predictor(cfg: SimConfig, seed: np.random.SeedSequence) -> Predictor:
    predictor, curve, _ = fit_predictor(cfg, seed)
    log.info("predictor trained: best epoch %d, val mse %.3e", curve.best_epoch,
             curve.val[curve.best_epoch - 1] if curve.best_epoch else float("nan"))
    return predictor


def seed_streams(cfg: SimConfig):
    env_ss, agent_ss, act_ss, upd_ss, pred_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(6)
    return env_ss, agent_ss, act_ss, upd_ss, pred_ss, eval_ss


def make_agent(cfg: SimConfig, n_dus: int, seed: np.random.SeedSequence) -> SacAgent:
    n_slices = len(cfg.slices)
    return SacAgent(cfg.n_actors, 4 * n_slices, n_slices, cfg.sac, np.random.default_rng(seed))


def run_training(cfg: SimConfig, out_dir: str | Path | None = None, predictor: Predictor | None = None,
                 agent: SacAgent | None = None) -> tuple[RunMetrics, SacAgent, Predictor | None]:
    """Distributed SAC training loop (with or without the load forecaster)."""
    cfg.validate()
    t0 = time.perf_counter()
    env_ss, agent_ss, act_ss, upd_ss, pred_ss, eval_ss = seed_streams(cfg)
    if cfg.prediction and predictor is None:
        predictor = build_predictor(cfg, pred_ss)
    if not cfg.prediction:
        predictor = None
    t_pred = time.perf_counter()

    env = SlicingEnv(cfg, n_replicas=cfg.n_actors, seed=env_ss)
    if agent is None:
        agent = make_agent(cfg, env.n_dus, agent_ss)
    runner = EpisodeRunner(cfg, env, predictor)
    replay = DistributedReplay(cfg.n_actors, cfg.sac.buffer_capacity, agent.state_dim, agent.action_dim)
    act_rng = np.random.default_rng(act_ss)
    upd_rng = np.random.default_rng(upd_ss)
    monitor = ConvergenceMonitor(cfg.converge_window, cfg.converge_tol)
    metrics = RunMetrics(mode_name(cfg.prediction), cfg.sac.gamma, [s.name for s in cfg.slices])
    per_actor = max(1, cfg.sac.batch_size // cfg.n_actors)
    episode = 0
    try:
        for it in range(cfg.iterations):
            rewards = np.zeros(cfg.n_actors)
            for _ in range(cfg.n_evals):
                stats = collect_episode(agent, runner, replay, act_rng)
                for i, ret in enumerate(stats.returns):
                    metrics.returns.append((episode, it, i, float(ret)))
                    episode += 1
                rewards += stats.mean_reward / max(cfg.n_evals, 1)
            metrics.buffer_sizes.append(len(replay))
            before = [p.copy() for p in agent.actors.params()]
            p_loss, c_loss = np.full(cfg.n_actors, np.nan), float("nan")
            ready = min(len(b) for b in replay.buffers) >= per_actor
            if ready:
                for _ in range(cfg.sac.updates_per_iteration):
                    p_loss, c_loss = agent.update(replay, upd_rng)
            for i in range(cfg.n_actors):
                metrics.train_log.append((it, i, float(p_loss[i]), float(c_loss), float(rewards[i])))
            metrics.iterations_run = it + 1
            if ready and monitor.push(before, agent.actors.params()):
                metrics.converged = True
                log.info("policy converged after %d iterations", it + 1)
                break
            if (it + 1) % 25 == 0:
                log.info("iteration %d: mean return %.2f", it + 1, metrics.final_return(cfg.n_actors * 25))
    except NumericalFailure:
        if out_dir is not None:
            save_models(out_dir, agent, predictor)
        raise
    t_train = time.perf_counter()
    metrics.predictor_calls = runner.predictor_calls
    metrics.evaluation = evaluate_policy(agent, cfg, cfg.eval_episodes, predictor, eval_ss)
    t_end = time.perf_counter()
    metrics.timings = {"predictor": t_pred - t0, "training": t_train - t_pred, "evaluation": t_end - t_train}
    if out_dir is not None:
        save_models(out_dir, agent, predictor)
    return metrics, agent, predictor


def evaluate_policy(agent: SacAgent, cfg: SimConfig, episodes: int, predictor: Predictor | None = None,
                    seed: int | np.random.SeedSequence | None = None, policy=None) -> EvalStats:
    """Deterministic (mean-action) episodes on one shared network.

    DU m is steered by actor m mod N_m. Nothing is written to any buffer and
    no parameter changes. ``policy`` overrides the agent, e.g. for a
    random-action baseline.
    """
    stats = EvalStats()
    if episodes <= 0:
        return stats
    if seed is None:
        seed = seed_streams(cfg)[-1]
    env = SlicingEnv(cfg, n_replicas=1, seed=seed)
    runner = EpisodeRunner(cfg, env, predictor if cfg.prediction else None)
    n_dus, n_slices = env.n_dus, env.n_slices
    owner = np.array([m % agent.n_actors for m in range(n_dus)])

    def mean_policy(states):
        x = np.broadcast_to(states[0], (agent.n_actors,) + states.shape[1:])
        raw, _ = agent.act(np.ascontiguousarray(x), None, deterministic=True)
        return raw[owner, np.arange(n_dus)][None]

    violations: list[list[float]] = [[] for _ in range(n_slices)]
    flags: list[list[bool]] = [[] for _ in range(n_slices)]
    served = np.zeros(env.n_users)

    def record(s, raw, r, s2, report):
        nonlocal served
        served += report.served[0]
        present = report.members[0] > 0
        for sl in range(n_slices):
            mask = present[:, sl]
            violations[sl].extend(report.violation[0][mask, sl].tolist())
            flags[sl].extend(report.flags[0][mask, sl].tolist())

    rewards = []
    for _ in range(episodes):
        served = np.zeros(env.n_users)
        disc, mean_r = runner.run(policy or mean_policy, cfg.sac.gamma, record)
        stats.returns.append(float(disc.mean()))
        rewards.append(float(mean_r.mean()))
        for user, total in enumerate(served):
            stats.throughput.append((user, int(env.slice_of[user]), float(total / cfg.episode_len / 1e6)))
    stats.mean_return = float(np.mean(stats.returns))
    stats.mean_reward = float(np.mean(rewards))
    stats.violation_std = [float(np.std(v)) if v else 0.0 for v in violations]
    stats.violation_rate = [float(np.mean(f)) if f else 0.0 for f in flags]
    return stats


def random_policy(rng: np.random.Generator):
    def policy(states):
        return rng.uniform(-1.0, 1.0, size=states.shape[:-1] + (states.shape[-1] // 4,))
    return policy


# ---------------------------------------------------------------- export


def save_models(out_dir: str | Path, agent: SacAgent, predictor: Predictor | None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "agent.json", agent.tensors())
    if predictor is not None:
        save_checkpoint(out / "predictor.json", dict(predictor.stack.named_params()))


def _fmt(x: float) -> str:
    return repr(float(x))


def export_metrics(metrics: RunMetrics | list[RunMetrics], out_dir: str | Path) -> dict[str, Path]:
    """Write returns.csv, throughput_samples.csv, qos_violation_std.csv and training_log.csv."""
    runs = metrics if isinstance(metrics, list) else [metrics]
    if not runs or not any(m.returns for m in runs):
        raise ValueError("nothing to export")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {name: out / f"{name}.csv" for name in ("returns", "throughput_samples", "qos_violation_std", "training_log")}
    with open(paths["returns"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RETURNS_HEADER)
        for m in runs:
            for ep, _, _, ret in m.returns:
                w.writerow([ep, _fmt(ret), m.mode, _fmt(m.gamma)])
    with open(paths["throughput_samples"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(THROUGHPUT_HEADER + ("mode",))
        for m in runs:
            for user, sl, mbps in m.evaluation.throughput:
                w.writerow([user, m.slice_names[sl], _fmt(mbps), m.mode])
    with open(paths["qos_violation_std"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VIOLATION_HEADER)
        for m in runs:
            for sl, std in enumerate(m.evaluation.violation_std):
                w.writerow([m.slice_names[sl], _fmt(std), m.mode])
    with open(paths["training_log"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAINING_LOG_HEADER)
        for m in runs:
            for it, actor, pl, cl, mr in m.train_log:
                w.writerow([it, actor, _fmt(pl), _fmt(cl), _fmt(mr)])
    return paths


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
