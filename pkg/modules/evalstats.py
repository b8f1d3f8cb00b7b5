"""
训练后评估与统计分析

- post_train_eval：1000 个回合的训练后评估（评估阈值 10 cm / 17°）
- accuracy：到达距离阈值以内的回合百分比（边界相等计为成功）
- joint_angle_stats：关节角分布（均值、总体标准差、直方图）
- anova_oneway / compare_agents：多个智能体成功率的单因素方差分析
- steps_to_success / paired_comparison / learning_curve：学习速度分析
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import numpy as np
import scipy.special as special
from scipy import stats
from config.config import EnvConfig, ExperimentConfig
from modules.a3c import EvalLogEntry
from modules.checkpoint import restore_model
from modules.controllers import Controller, EpisodeResult, NetworkController, play_episode
from modules.kge import build_scene_embedder
from modules.reach_arena import ReachArena
from utils.logger import rl_logger

EPISODE_COLUMNS = [
    "episode",
    "seed",
    "target_kind",
    "realized_color",
    "steps",
    "return",
    "final_rel_dist",
    "final_rel_deg",
    "success",
]
COMPARISON_COLUMNS = ["agent", "accuracy", "best_step", "F", "p"]


@dataclass
class EvalReport:
    n_episodes: int
    mean_return: float
    std_return: float
    mean_length: float
    std_length: float
    accuracy: float
    dist_threshold: float
    deg_threshold: float
    mean_failure_dist: Optional[float] = None
    std_failure_dist: Optional[float] = None
    max_failure_dist: Optional[float] = None
    joint_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    episodes: List[EpisodeResult] = field(default_factory=list)

    @property
    def has_failures(self) -> bool:
        return self.max_failure_dist is not None

    def joint_log(self) -> List[Dict[str, float]]:
        """逐步关节角记录，列名 joint_0 … joint_{n-1}"""
        rows = []
        for sample in self.joint_samples:
            rows.append({f"joint_{j}": float(a) for j, a in enumerate(sample)})
        return rows

    def summary_rows(self) -> List[Tuple[str, str]]:
        def fmt(value: Optional[float], digits: int = 4) -> str:
            return "-" if value is None else f"{value:.{digits}f}"

        return [
            ("episodes", str(self.n_episodes)),
            ("mean_return", fmt(self.mean_return)),
            ("std_return", fmt(self.std_return)),
            ("mean_length", fmt(self.mean_length, 2)),
            ("std_length", fmt(self.std_length, 2)),
            ("mean_failure_dist", fmt(self.mean_failure_dist)),
            ("std_failure_dist", fmt(self.std_failure_dist)),
            ("max_failure_dist", fmt(self.max_failure_dist)),
            ("accuracy", fmt(self.accuracy, 2)),
        ]


def accuracy(final_dists: Sequence[float], threshold: float) -> float:
    """100 · #(dist ≤ threshold) / N"""
    if len(final_dists) == 0:
        raise ValueError("accuracy: 距离列表为空")
    dists = np.asarray(final_dists, dtype=np.float64)
    return 100.0 * float(np.count_nonzero(dists <= threshold)) / len(dists)


def evaluation_seeds(seed: int, n: int) -> List[int]:
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def build_report(
    episodes: Sequence[EpisodeResult], dist_threshold: float, deg_threshold: float
) -> EvalReport:
    if not episodes:
        raise ValueError("没有评估回合")
    returns = np.array([e.total_return for e in episodes])
    lengths = np.array([e.steps for e in episodes], dtype=np.float64)
    final_dists = np.array([e.final_rel_dist for e in episodes])

    # 失败距离：未到达距离阈值的回合的最终距离
    failures = final_dists[final_dists > dist_threshold]
    samples = [s for e in episodes for s in e.joint_samples]

    report = EvalReport(
        n_episodes=len(episodes),
        mean_return=float(returns.mean()),
        std_return=float(returns.std()),
        mean_length=float(lengths.mean()),
        std_length=float(lengths.std()),
        accuracy=accuracy(final_dists, dist_threshold),
        dist_threshold=dist_threshold,
        deg_threshold=deg_threshold,
        joint_samples=np.array(samples) if samples else np.zeros((0, 0)),
        episodes=list(episodes),
    )
    if failures.size:
        report.mean_failure_dist = float(failures.mean())
        report.std_failure_dist = float(failures.std())
        report.max_failure_dist = float(failures.max())
    return report


def post_train_eval(
    controller: Controller,
    env_cfg: EnvConfig,
    n: int = 1000,
    dist_thr: float = 0.10,
    deg_thr: float = 17.0,
    seed: int = 12345,
    episodes_csv: Optional[str] = None,
) -> EvalReport:
    """以评估阈值替换训练阈值后运行 n 个回合"""
    if n < 1:
        raise ValueError("post_train_eval: 回合数必须为正")
    env = ReachArena(replace(env_cfg, success_dist=dist_thr, success_deg=deg_thr))
    episodes = [
        play_episode(env, controller, s, episode=i) for i, s in enumerate(evaluation_seeds(seed, n))
    ]
    report = build_report(episodes, dist_thr, deg_thr)
    if episodes_csv:
        write_episodes_csv(episodes, episodes_csv)
    rl_logger.info(
        f"评估完成 ({controller.name}, {n} 回合): 准确率 {report.accuracy:.2f}%，"
        f"平均回报 {report.mean_return:.2f}"
    )
    return report


def checkpoint_controller(
    checkpoint_path: str, config: ExperimentConfig, greedy: Optional[bool] = None
) -> NetworkController:
    """按实验配置加载检查点；结构不符时抛出 CheckpointError"""
    model, _ = restore_model(checkpoint_path, expected=config.agent)
    model.eval()
    embedder = build_scene_embedder(config.kge, config.env)
    return NetworkController(
        model, embedder, greedy=config.eval.greedy if greedy is None else greedy
    )


def write_episodes_csv(episodes: Sequence[EpisodeResult], path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(EPISODE_COLUMNS)
        for e in episodes:
            writer.writerow(
                [
                    e.episode,
                    e.seed,
                    e.target_kind,
                    e.realized_color,
                    e.steps,
                    f"{e.total_return:.6f}",
                    f"{e.final_rel_dist:.6f}",
                    f"{e.final_rel_deg:.4f}",
                    int(e.success),
                ]
            )


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, csv_path: str, text_path: str, joint_ranges=None, bins: int = 20):
    rows = report.summary_rows()
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)

    text = _aligned(["metric", "value"], rows)
    if report.joint_samples.size and joint_ranges is not None:
        joint_rows = []
        log = report.joint_log()
        for j, value_range in enumerate(joint_ranges):
            js = joint_angle_stats(log, j, value_range, bins)
            joint_rows.append([f"joint_{j}", f"{js.mean:.4f}", f"{js.std:.4f}"])
        text += "\n" + _aligned(["joint", "mean_rad", "std_rad"], joint_rows)
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(text)


@dataclass
class JointAngleStats:
    mean: float
    std: float
    counts: np.ndarray
    bin_edges: np.ndarray


def joint_angle_stats(
    logs: Sequence[Mapping[str, float]],
    joint_index: int,
    value_range: Optional[Tuple[float, float]] = None,
    bins: int = 20,
) -> JointAngleStats:
    """全部评估回合全部步的关节角：均值、总体标准差（除以 N）与固定分箱直方图"""
    column = f"joint_{joint_index}"
    if not logs:
        raise ValueError("joint_angle_stats: 日志为空")
    if any(column not in row for row in logs):
        raise ValueError(f"joint_angle_stats: 日志缺少列 {column}")
    samples = np.array([float(row[column]) for row in logs], dtype=np.float64)

    if value_range is None:
        value_range = (-math.pi, math.pi)
    counts, edges = np.histogram(samples, bins=bins, range=tuple(value_range))
    return JointAngleStats(
        mean=float(samples.mean()), std=float(samples.std(ddof=0)), counts=counts, bin_edges=edges
    )


@dataclass
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int
    group_means: List[float]


def anova_oneway(*groups: Sequence[float]) -> AnovaResult:
    """单因素方差分析：F = MS_between / MS_within，p 值由 F 分布生存函数给出"""
    if len(groups) < 2:
        raise ValueError("anova_oneway: 至少需要两组数据")
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if any(a.size < 2 for a in arrays):
        raise ValueError("anova_oneway: 每组至少需要 2 个样本")

    k = len(arrays)
    n_total = sum(a.size for a in arrays)
    grand_mean = np.concatenate(arrays).mean()
    means = [float(a.mean()) for a in arrays]
    if max(means) == min(means):
        ss_between = 0.0
    else:
        ss_between = float(sum(a.size * (m - grand_mean) ** 2 for a, m in zip(arrays, means)))
    ss_within = float(sum(((a - m) ** 2).sum() for a, m in zip(arrays, means)))
    df_between, df_within = k - 1, n_total - k

    if ss_within == 0.0:
        if ss_between == 0.0:
            return AnovaResult(0.0, 1.0, df_between, df_within, means)
        rl_logger.warning("ANOVA: 组内方差为 0 而组均值不同（退化数据），报告 p = 0")
        return AnovaResult(math.inf, 0.0, df_between, df_within, means)

    F = (ss_between / df_between) / (ss_within / df_within)
    p = float(special.fdtrc(df_between, df_within, F))
    return AnovaResult(float(F), min(1.0, max(0.0, p)), df_between, df_within, means)


@dataclass
class AgentSummary:
    name: str
    accuracy: float
    best_step: int
    success_rates: List[float]


@dataclass
class ComparisonTable:
    rows: List[Dict[str, object]]
    pairwise: List[Tuple[str, str, AnovaResult]]

    def to_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=COMPARISON_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _format_cell(row[k]) for k in COMPARISON_COLUMNS})

    def to_text(self) -> str:
        rows = [[_format_cell(row[k]) for k in COMPARISON_COLUMNS] for row in self.rows]
        text = _aligned(COMPARISON_COLUMNS, rows)
        if self.pairwise:
            pair_rows = [
                [a, b, f"{r.F:.4f}", f"{r.p:.6f}", str(r.df_between), str(r.df_within)]
                for a, b, r in self.pairwise
            ]
            text += "\n" + _aligned(["agent_a", "agent_b", "F", "p", "df_b", "df_w"], pair_rows)
        return text


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}" if math.isfinite(value) else str(value)
    return str(value)


def compare_agents(summaries: Sequence[AgentSummary]) -> ComparisonTable:
    """
    每个智能体一行（按输入顺序）：准确率、最佳模型步数，以及与第一个智能体
    （参照，通常为 BM）的 ANOVA 结果；另附全部两两比较。
    """
    if len(summaries) < 2:
        raise ValueError("compare_agents: 至少需要两个智能体")

    reference = summaries[0]
    rows: List[Dict[str, object]] = []
    for i, s in enumerate(summaries):
        row = {"agent": s.name, "accuracy": s.accuracy, "best_step": s.best_step, "F": None, "p": None}
        if i > 0:
            result = anova_oneway(reference.success_rates, s.success_rates)
            row["F"], row["p"] = result.F, result.p
        rows.append(row)

    pairwise = []
    for i in range(len(summaries)):
        for j in range(i + 1, len(summaries)):
            a, b = summaries[i], summaries[j]
            pairwise.append((a.name, b.name, anova_oneway(a.success_rates, b.success_rates)))
    return ComparisonTable(rows=rows, pairwise=pairwise)


def steps_to_success(log: Sequence[EvalLogEntry], threshold: float) -> Optional[int]:
    """阶段评估成功率首次达到阈值的步数；从未达到时返回 None"""
    for entry in sorted(log, key=lambda e: e.step):
        if entry.success_rate >= threshold:
            return entry.step
    return None


@dataclass
class PairedComparison:
    median_a: float
    median_b: float
    mean_difference: float
    p_value: float
    n_pairs: int


def paired_comparison(a: Sequence[float], b: Sequence[float]) -> PairedComparison:
    """单侧配对比较（H1: a 小于 b），Wilcoxon 符号秩检验"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("paired_comparison: 两组数据长度必须一致且非空")
    differences = a - b
    if np.all(differences == 0):
        p_value = 1.0
    else:
        p_value = float(stats.wilcoxon(a, b, alternative="less").pvalue)
    return PairedComparison(
        median_a=float(np.median(a)),
        median_b=float(np.median(b)),
        mean_difference=float(differences.mean()),
        p_value=p_value,
        n_pairs=int(a.size),
    )


def learning_curve(log: Sequence[EvalLogEntry], window: int = 5) -> Tuple[np.ndarray, np.ndarray]:
    """阶段评估平均回报的滑动平均（窗口不足时使用已有的点）"""
    if window < 1:
        raise ValueError("learning_curve: 窗口必须为正")
    ordered = sorted(log, key=lambda e: e.step)
    steps = np.array([e.step for e in ordered], dtype=np.int64)
    returns = np.array([e.avg_return for e in ordered], dtype=np.float64)
    cumsum = np.concatenate([[0.0], np.cumsum(returns)])
    idx = np.arange(1, len(returns) + 1)
    start = np.maximum(idx - window, 0)
    trend = (cumsum[idx] - cumsum[start]) / (idx - start)
    return steps, trend


def success_rate_runs(
    controller: Controller,
    env_cfg: EnvConfig,
    runs: int,
    episodes: int,
    dist_thr: float,
    deg_thr: float,
    seed: int,
) -> List[float]:
    """ANOVA 用的多次独立评估：每次使用不同种子，返回各次的成功率（0~1）"""
    rates = []
    for r in range(runs):
        run_seed = int(np.random.default_rng([seed, r]).integers(0, 2**31 - 1))
        report = post_train_eval(controller, env_cfg, episodes, dist_thr, deg_thr, run_seed)
        rates.append(report.accuracy / 100.0)
    return rates
