"""
异步优势演员-评论家（A3C）训练

- 纯函数部分：TD 误差、GAE、n 步回报、策略损失、价值损失、最佳模型选择
- SharedParameters：全局网络 + 共享 RMSprop 状态 + 单调递增的全局步数
- worker_loop：单个工作线程的采样与更新循环
- A3CTrainer：组织工作线程、阶段评估线程、检查点与评估日志
"""

import csv
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
import torch
from tqdm import tqdm
from config.config import ExperimentConfig, TrainConfig
from modules.autodiff import SharedRMSprop, backward, clip_grad_norm
from modules.checkpoint import LATEST_NAME, checkpoint_name, save_checkpoint
from modules.controllers import NetworkController, play_episode
from modules.kge import SceneEmbedder, SceneEmbedding, build_scene_embedder
from modules.policy import PolicyNetwork, sample_actions
from modules.reach_arena import ReachArena
from utils.logger import rl_logger

EVAL_LOG_NAME = "eval_log.csv"
EVAL_LOG_COLUMNS = ["step", "avg_return", "success_rate", "checkpoint_path"]
BEST_POINTER_NAME = "best.txt"

TensorLike = Union[torch.Tensor, Sequence[float], np.ndarray]


# ---------------------------------------------------------------- 损失与回报


def td_error(reward: float, value: float, next_value: float, gamma: float, terminal: bool = False) -> float:
    """δ = r + γ·V(s')·(1−terminal) − V(s)"""
    bootstrap = 0.0 if terminal else gamma * next_value
    return reward + bootstrap - value


def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    bootstrap: float,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """反向递推 A_t = δ_t + γλ·A_{t+1}，最后一步之后 A = 0"""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ValueError(
            f"compute_gae: rewards 与 values 长度不一致 ({rewards.shape} / {values.shape})"
        )

    advantages = np.zeros_like(rewards)
    running = 0.0
    next_value = float(bootstrap)
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
        next_value = values[t]
    return advantages


def n_step_returns(rewards: Sequence[float], bootstrap: float, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    returns = np.zeros_like(rewards)
    running = float(bootstrap)
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def _as_vector(values: TensorLike, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    if isinstance(values, (list, tuple)) and values and torch.is_tensor(values[0]):
        vector = torch.stack([v.reshape(()) for v in values])
    else:
        vector = torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values)
    vector = vector.reshape(-1)
    return vector.to(dtype) if dtype is not None else vector


def policy_loss(
    log_probs: TensorLike, advantages: TensorLike, entropies: TensorLike, beta: float
) -> torch.Tensor:
    """−Σ_t (log π(a_t|s_t)·A_t − β·H_t)，优势作为常数不回传梯度"""
    log_probs = _as_vector(log_probs)
    dtype = log_probs.dtype if log_probs.is_floating_point() else torch.float64
    log_probs = log_probs.to(dtype)
    advantages = _as_vector(advantages, dtype).detach()
    entropies = _as_vector(entropies, dtype)
    if not (log_probs.shape == advantages.shape == entropies.shape):
        raise ValueError("policy_loss: log_probs、advantages、entropies 长度必须一致")
    return -(log_probs * advantages - beta * entropies).sum()


def value_loss(returns: TensorLike, values: TensorLike) -> torch.Tensor:
    """½·Σ(R − V)²"""
    values = _as_vector(values)
    dtype = values.dtype if values.is_floating_point() else torch.float64
    values = values.to(dtype)
    returns = _as_vector(returns, dtype).detach()
    if returns.shape != values.shape:
        raise ValueError("value_loss: returns 与 values 长度必须一致")
    return 0.5 * ((returns - values) ** 2).sum()


# ---------------------------------------------------------------- 轨迹与共享参数


@dataclass
class Trajectory:
    """一次更新窗口内（≤ t_max 步）的采样数据"""

    kge: Optional[SceneEmbedding] = None
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[List[int]] = field(default_factory=list)
    log_probs: List[torch.Tensor] = field(default_factory=list)
    entropies: List[torch.Tensor] = field(default_factory=list)
    values: List[torch.Tensor] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)
    bootstrap: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)

    def append(self, observation, actions, log_prob, entropy, value, reward, done):
        self.observations.append(observation)
        self.actions.append(list(actions))
        self.log_probs.append(log_prob)
        self.entropies.append(entropy)
        self.values.append(value)
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    @property
    def terminal(self) -> bool:
        return bool(self.dones) and self.dones[-1]


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    grad_norm: float
    steps: int


def trajectory_loss(traj: Trajectory, cfg: TrainConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    values = torch.stack(traj.values)
    value_estimates = values.detach().cpu().numpy()
    advantages = compute_gae(traj.rewards, value_estimates, traj.bootstrap, cfg.gamma, cfg.gae_lambda)
    returns = n_step_returns(traj.rewards, traj.bootstrap, cfg.gamma)
    p_loss = policy_loss(traj.log_probs, advantages, traj.entropies, cfg.entropy_beta)
    v_loss = value_loss(returns, values)
    return p_loss, v_loss


class SharedParameters:
    """全局网络参数、共享优化器状态与全局步数"""

    def __init__(self, model: PolicyNetwork, cfg: TrainConfig):
        self.model = model
        self.optimizer = SharedRMSprop(
            model.parameters(), lr=cfg.lr, alpha=cfg.rmsprop_decay, eps=cfg.rmsprop_eps
        )
        self.hogwild = cfg.hogwild
        self._param_lock = threading.Lock()
        self._tensor_locks = [threading.Lock() for _ in model.parameters()]
        self._step_lock = threading.Lock()
        self._global_step = 0

    @property
    def global_step(self) -> int:
        return self._global_step

    def advance(self, n_steps: int) -> int:
        if n_steps < 0:
            raise ValueError("全局步数只能增加")
        with self._step_lock:
            self._global_step += n_steps
            return self._global_step

    def snapshot(self) -> Dict[str, torch.Tensor]:
        with self._param_lock:
            return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def snapshot_model(self, state: Optional[Dict[str, torch.Tensor]] = None) -> PolicyNetwork:
        model = PolicyNetwork(self.model.cfg, seed=0, dtype=self.model.dtype)
        model.load_state_dict(self.snapshot() if state is None else state)
        return model

    def sync_into(self, local: PolicyNetwork):
        local.load_state_dict(self.snapshot())

    def apply_gradients(self, local: PolicyNetwork):
        """
        本地梯度直接交给共享 RMSprop，每个工作线程的梯度恰好使用一次。
        默认整次更新持有全局锁；hogwild 模式只对单个参数加锁，不同参数的更新可以交错。
        """
        grads = [None if p.grad is None else p.grad.detach() for p in local.parameters()]
        if self.hogwild:
            self.optimizer.apply_gradients(grads, self._tensor_locks)
        else:
            with self._param_lock:
                self.optimizer.apply_gradients(grads)


# ---------------------------------------------------------------- 工作线程


def episode_seed_stream(seed: int) -> Callable[[], int]:
    rng = np.random.default_rng(seed)
    return lambda: int(rng.integers(0, 2**31 - 1))


def worker_loop(
    worker_id: int,
    env: ReachArena,
    shared: SharedParameters,
    embedder: Optional[SceneEmbedder],
    cfg: TrainConfig,
    seed: int,
    after_update: Optional[Callable[[int, UpdateStats], None]] = None,
    stop_event: Optional[threading.Event] = None,
):
    """同步 → 采样 ≤ t_max 步 → GAE/n 步回报 → 反向传播 → 梯度裁剪 → 共享 RMSprop → 推进全局步数"""
    local = PolicyNetwork(shared.model.cfg, seed=0, dtype=shared.model.dtype)
    generator = torch.Generator().manual_seed(seed)
    next_episode_seed = episode_seed_stream(seed)
    kge_dim = shared.model.cfg.kge_dim

    observation: Optional[np.ndarray] = None
    state = None
    kge: Optional[SceneEmbedding] = None
    episodes = 0
    episode_return = 0.0

    while shared.global_step < cfg.total_steps:
        if stop_event is not None and stop_event.is_set():
            break
        shared.sync_into(local)

        if observation is None:
            observation = env.reset(next_episode_seed())
            target = env.state.target
            kge = embedder.for_episode(target.spec.kind, target.color_name) if kge_dim > 0 else None
            state = local.initial_state()
            episode_return = 0.0
        else:
            # 跨更新窗口保留 LSTM 状态，但截断梯度
            state = state.detach()

        traj = Trajectory(kge=kge)
        for _ in range(cfg.rollout_length):
            output, state = local(observation, kge, state)
            actions, log_prob, entropy = sample_actions(output, generator)
            outcome = env.step(actions)
            traj.append(observation, actions, log_prob, entropy, output.value, outcome.reward, outcome.done)
            episode_return += outcome.reward
            observation = outcome.observation
            if outcome.done:
                episodes += 1
                rl_logger.debug(
                    f"[worker {worker_id}] 回合 {episodes} 结束: return={episode_return:.2f}, "
                    f"success={outcome.info['success']}"
                )
                observation = None
                break

        if not traj.terminal:
            with torch.no_grad():
                bootstrap_output, _ = local(observation, kge, state)
            traj.bootstrap = float(bootstrap_output.value)

        p_loss, v_loss = trajectory_loss(traj, cfg)
        local.zero_grad(set_to_none=True)
        backward(p_loss + v_loss)
        grad_norm = clip_grad_norm(local.parameters(), cfg.grad_clip_norm)
        shared.apply_gradients(local)
        step = shared.advance(len(traj))

        stats = UpdateStats(float(p_loss), float(v_loss), grad_norm, len(traj))
        rl_logger.debug(
            f"[worker {worker_id}] step={step} policy_loss={stats.policy_loss:.4f} "
            f"value_loss={stats.value_loss:.4f} grad_norm={grad_norm:.3f}"
        )
        if after_update is not None:
            after_update(step, stats)

    return episodes


# ---------------------------------------------------------------- 阶段评估与评估日志


@dataclass
class EvalLogEntry:
    step: int
    avg_return: float
    success_rate: float
    checkpoint_path: str


def frozen_eval_seeds(seed: int, n: int) -> List[int]:
    """阶段评估使用的固定初始配置，训练开始时确定"""
    rng = np.random.default_rng([seed, 40])
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def interim_evaluate(
    model: PolicyNetwork,
    env: ReachArena,
    seeds: Sequence[int],
    embedder: Optional[SceneEmbedder] = None,
    greedy: bool = False,
) -> Tuple[float, float]:
    """在固定初始配置上评估参数快照，返回 (平均回报, 成功率)"""
    controller = NetworkController(model, embedder, greedy=greedy)
    returns = []
    successes = 0
    for i, seed in enumerate(seeds):
        result = play_episode(env, controller, seed, episode=i)
        returns.append(result.total_return)
        successes += int(result.success)
    return float(np.mean(returns)), successes / len(seeds)


def write_eval_log(path: str, entries: Sequence[EvalLogEntry]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EVAL_LOG_COLUMNS)
        for e in entries:
            writer.writerow([e.step, f"{e.avg_return:.6f}", f"{e.success_rate:.6f}", e.checkpoint_path])


def read_eval_log(path: str) -> List[EvalLogEntry]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(EVAL_LOG_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: 评估日志缺少列 {sorted(missing)}")
        return [
            EvalLogEntry(
                step=int(row["step"]),
                avg_return=float(row["avg_return"]),
                success_rate=float(row["success_rate"]),
                checkpoint_path=row["checkpoint_path"],
            )
            for row in reader
        ]


def select_best(log: Sequence[EvalLogEntry]) -> EvalLogEntry:
    """平均回报最大的评估点；并列时取最早的步数"""
    if not log:
        raise ValueError("评估日志为空，无法选择最佳模型")
    best = log[0]
    for entry in log[1:]:
        if entry.avg_return > best.avg_return or (
            entry.avg_return == best.avg_return and entry.step < best.step
        ):
            best = entry
    return best


def read_best_pointer(run_dir: str) -> str:
    """返回 best.txt 指向的检查点绝对路径"""
    pointer = os.path.join(run_dir, BEST_POINTER_NAME)
    if not os.path.isfile(pointer):
        raise FileNotFoundError(f"{run_dir}: 缺少最佳模型指针 {BEST_POINTER_NAME}")
    with open(pointer, "r", encoding="utf-8") as f:
        relative = f.read().strip()
    if not relative:
        raise ValueError(f"{pointer}: 文件为空")
    return relative if os.path.isabs(relative) else os.path.join(run_dir, relative)


# ---------------------------------------------------------------- 训练器


@dataclass
class TrainSummary:
    run_dir: str
    final_step: int
    eval_log: List[EvalLogEntry]
    best: EvalLogEntry


class A3CTrainer:
    """
    A3C 训练流程：
    n_workers == 1 时在当前线程内顺序执行（确定性模式，阶段评估在更新之间内联执行）；
    否则启动 n_workers 个工作线程和一个阶段评估线程。
    """

    def __init__(self, config: ExperimentConfig, run_dir: str):
        self.config = config
        self.run_dir = run_dir
        self.checkpoint_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(self.checkpoint_dir, exist_ok=True)

        self.dtype = torch.float64 if config.train.precision == "float64" else torch.float32
        self.embedder = build_scene_embedder(config.kge, config.env)
        if self.embedder.kge_dim != config.agent.kge_dim:
            raise ValueError(
                f"场景嵌入维度 {self.embedder.kge_dim} 与 agent.kge_dim {config.agent.kge_dim} 不一致"
            )

        model = PolicyNetwork(config.agent, seed=config.seed, dtype=self.dtype)
        self.shared = SharedParameters(model, config.train)
        self.eval_seeds = frozen_eval_seeds(config.seed, config.train.interim_episodes)
        self.eval_env = ReachArena(config.env)

        self.eval_log: List[EvalLogEntry] = []
        self._evaluated: Dict[int, EvalLogEntry] = {}
        self._eval_lock = threading.Lock()
        self._stop = threading.Event()
        self._errors: List[Tuple[int, BaseException]] = []

        rl_logger.info(
            f"模型参数量: {model.parameter_count()}，LSTM 输入宽度: {model.lstm_input_width}，"
            f"KGE 模式: {config.kge.mode}"
        )

    # 评估与检查点
    def evaluate_and_checkpoint(
        self, step: int, state: Optional[Dict[str, torch.Tensor]] = None
    ) -> EvalLogEntry:
        """评估在 step 时刻取得的参数快照（state 为空时现取），保存检查点并追加评估日志"""
        with self._eval_lock:
            if step in self._evaluated:
                return self._evaluated[step]
            model = self.shared.snapshot_model(state)
            avg_return, success_rate = interim_evaluate(
                model, self.eval_env, self.eval_seeds, self.embedder, self.config.eval.greedy
            )

            relative = os.path.join("checkpoints", checkpoint_name(step))
            save_checkpoint(model, step, os.path.join(self.run_dir, relative))
            save_checkpoint(model, step, os.path.join(self.checkpoint_dir, LATEST_NAME))

            entry = EvalLogEntry(step, avg_return, success_rate, relative)
            self.eval_log.append(entry)
            self._evaluated[step] = entry
            write_eval_log(os.path.join(self.run_dir, EVAL_LOG_NAME), self.eval_log)

            rl_logger.info(
                f"阶段评估 step={step}: 平均回报 {avg_return:.2f}，成功率 {success_rate:.1%}"
            )
            return entry

    def _crosses_boundary(self, previous: int, current: int) -> bool:
        """(previous, current] 中是否包含 interim_interval 的整数倍"""
        interval = self.config.train.interim_interval
        return current // interval > previous // interval

    def _worker_seed(self, worker_id: int) -> int:
        return int(np.random.default_rng([self.config.seed, worker_id]).integers(0, 2**31 - 1))

    def _make_env(self, worker_id: int) -> ReachArena:
        return ReachArena(self.config.env, seed=self._worker_seed(worker_id))

    def _run_inline(self, progress: tqdm):
        train_cfg = self.config.train

        def after_update(step: int, stats: UpdateStats):
            progress.update(stats.steps)
            if self._crosses_boundary(step - stats.steps, step):
                self.evaluate_and_checkpoint(step)

        worker_loop(
            0,
            self._make_env(0),
            self.shared,
            self.embedder,
            train_cfg,
            self._worker_seed(0),
            after_update=after_update,
            stop_event=self._stop,
        )

    def _run_threaded(self, progress: tqdm):
        train_cfg = self.config.train
        torch.set_num_threads(1)
        pending: "queue.Queue[Tuple[int, Dict[str, torch.Tensor]]]" = queue.Queue()

        # 全局步数的推进是原子的，每个边界恰好由一个工作线程跨过并取快照
        def after_update(step: int, stats: UpdateStats):
            if self._crosses_boundary(step - stats.steps, step):
                pending.put((step, self.shared.snapshot()))

        def run_worker(worker_id: int):
            try:
                worker_loop(
                    worker_id,
                    self._make_env(worker_id),
                    self.shared,
                    self.embedder,
                    train_cfg,
                    self._worker_seed(worker_id),
                    after_update=after_update,
                    stop_event=self._stop,
                )
            except BaseException as e:
                rl_logger.exception(f"工作线程 {worker_id} 异常退出: {e}")
                self._errors.append((worker_id, e))
                self._stop.set()

        def run_evaluator():
            while not self._errors:
                try:
                    step, state = pending.get(timeout=0.2)
                except queue.Empty:
                    if self._stop.is_set():
                        break
                    continue
                try:
                    self.evaluate_and_checkpoint(step, state)
                except BaseException as e:
                    rl_logger.exception(f"阶段评估失败: {e}")
                    self._errors.append((-1, e))
                    self._stop.set()

        workers = [
            threading.Thread(target=run_worker, args=(i,), name=f"a3c-worker-{i}", daemon=True)
            for i in range(train_cfg.n_workers)
        ]
        evaluator = threading.Thread(target=run_evaluator, name="a3c-evaluator", daemon=True)
        for t in workers:
            t.start()
        evaluator.start()

        shown = 0
        while any(t.is_alive() for t in workers):
            time.sleep(0.5)
            current = min(self.shared.global_step, train_cfg.total_steps)
            progress.update(current - shown)
            shown = current
        for t in workers:
            t.join()
        # 工作线程结束后评估线程处理完剩余快照再退出
        self._stop.set()
        evaluator.join()

    def train(self) -> TrainSummary:
        train_cfg = self.config.train
        rl_logger.info(
            f"开始训练: {train_cfg.n_workers} 个工作线程，总步数 {train_cfg.total_steps}，"
            f"阶段评估间隔 {train_cfg.interim_interval}"
        )

        with tqdm(total=train_cfg.total_steps, desc="训练", unit="step") as progress:
            try:
                if train_cfg.n_workers == 1:
                    self._run_inline(progress)
                else:
                    self._run_threaded(progress)
            except KeyboardInterrupt:
                self._stop.set()
                latest = os.path.join(self.checkpoint_dir, LATEST_NAME)
                save_checkpoint(self.shared.snapshot_model(), self.shared.global_step, latest)
                rl_logger.warning(f"训练被中断，最新参数已保存到 {latest}")
                raise

        if self._errors:
            worker_id, error = self._errors[0]
            raise RuntimeError(f"工作线程 {worker_id} 失败: {error}") from error

        # 结束时总是做一次最终评估
        final_step = self.shared.global_step
        self.evaluate_and_checkpoint(final_step)

        best = select_best(self.eval_log)
        with open(os.path.join(self.run_dir, BEST_POINTER_NAME), "w", encoding="utf-8") as f:
            f.write(best.checkpoint_path + "\n")
        rl_logger.info(
            f"训练完成: 全局步数 {final_step}，最佳模型 step={best.step} "
            f"(平均回报 {best.avg_return:.2f})"
        )
        return TrainSummary(self.run_dir, final_step, list(self.eval_log), best)
