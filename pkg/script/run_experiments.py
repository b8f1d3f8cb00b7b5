"""
实验流程脚本

    matrix        训练 BM / partial / full（可选颜色随机化）的多个种子，然后运行比较
    trainability  2 连杆、只看距离的可训练性检查：5 个种子中至少 4 个阶段成功率达到 60%
    directional   颜色随机化下 full KGE 与 BM 的学习速度配对比较（成功率首次达到 40% 的步数）

用法:
    python script/run_experiments.py trainability --seeds 0 1 2 3 4
    python script/run_experiments.py directional --seeds 0 1 2 3 4 --steps 500000
    python script/run_experiments.py matrix --dr --seeds 1 2 3
"""

import argparse
import os
import sys
from typing import Dict, List, Optional

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.config import ExperimentConfig  # noqa: E402
from modules.a3c import A3CTrainer, TrainSummary  # noqa: E402
from modules.evalstats import learning_curve, paired_comparison, steps_to_success  # noqa: E402
from utils.logger import rl_logger, setup_logger  # noqa: E402

EXPERIMENT_DIR = os.path.join("config", "experiments")


def train_run(
    config_name: str,
    seed: int,
    out_root: str,
    steps: Optional[int] = None,
    workers: Optional[int] = None,
) -> TrainSummary:
    config = ExperimentConfig(os.path.join(EXPERIMENT_DIR, f"{config_name}.yaml"))
    config.seed = seed
    if steps is not None:
        config.train.total_steps = steps
    if workers is not None:
        config.train.n_workers = workers
    config.validate()

    run_dir = os.path.join(out_root, f"{config_name}_s{seed}")
    os.makedirs(run_dir, exist_ok=True)
    config.output_dir = run_dir
    config.save_to_file(os.path.join(run_dir, "config.yaml"))
    return A3CTrainer(config, run_dir).train()


def run_matrix(args) -> int:
    names = ["bm", "partial_kge", "full_kge"]
    if args.dr:
        names = [f"{n}_dr" for n in names]

    from main import main as cli_main

    for seed in args.seeds:
        run_dirs = []
        for name in names:
            summary = train_run(name, seed, args.out, args.steps, args.workers)
            run_dirs.append(summary.run_dir)
        compare_dir = os.path.join(args.out, f"compare_s{seed}")
        code = cli_main(
            ["compare", "--config", os.path.join(EXPERIMENT_DIR, f"{names[0]}.yaml"), "--out", compare_dir]
            + run_dirs
        )
        if code != 0:
            return code
    return 0


def run_trainability(args) -> int:
    threshold = 0.6
    passed = 0
    for seed in args.seeds:
        summary = train_run("reach2_distance", seed, args.out, args.steps, args.workers)
        best_rate = max(e.success_rate for e in summary.eval_log)
        ok = best_rate >= threshold
        passed += int(ok)
        rl_logger.info(f"种子 {seed}: 最高阶段成功率 {best_rate:.1%} {'✅' if ok else '❌'}")

    required = len(args.seeds) - 1 if len(args.seeds) > 1 else 1
    print(f"trainability: {passed}/{len(args.seeds)} 个种子达到 {threshold:.0%}（要求 ≥ {required}）")
    return 0 if passed >= required else 1


def run_directional(args) -> int:
    threshold = 0.4
    results: Dict[str, List[float]] = {"bm_dr": [], "full_kge_dr": []}
    for seed in args.seeds:
        for name in results:
            summary = train_run(name, seed, args.out, args.steps, args.workers)
            reached = steps_to_success(summary.eval_log, threshold)
            if reached is None:
                # 从未达到阈值：记为总步数加一个评估间隔
                config = ExperimentConfig(os.path.join(summary.run_dir, "config.yaml"))
                reached = config.train.total_steps + config.train.interim_interval
            results[name].append(float(reached))

            steps, trend = learning_curve(summary.eval_log, window=3)
            rl_logger.info(
                f"{name} 种子 {seed}: 成功率达到 {threshold:.0%} 的步数 {reached:.0f}，"
                f"回报趋势末值 {trend[-1]:.2f}"
            )

    comparison = paired_comparison(results["full_kge_dr"], results["bm_dr"])
    print(
        f"median steps-to-{threshold:.0%}: full={comparison.median_a:.0f} bm={comparison.median_b:.0f} "
        f"mean diff={comparison.mean_difference:.0f} one-sided p={comparison.p_value:.4f} "
        f"(n={comparison.n_pairs})"
    )
    speedup = 1.0 - comparison.median_a / comparison.median_b if comparison.median_b else float("nan")
    print(f"relative reduction of median learning time: {speedup:.1%}")
    return 0 if comparison.median_a <= comparison.median_b else 1


def main():
    parser = argparse.ArgumentParser(description="KGE-A3C 实验流程")
    parser.add_argument("protocol", choices=["matrix", "trainability", "directional"])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--dr", action="store_true", help="matrix：使用颜色随机化配置")
    parser.add_argument("--out", default="runs/experiments")
    args = parser.parse_args()

    setup_logger(log_dir=os.path.join(args.out, "logs"))

    protocols = {
        "matrix": run_matrix,
        "trainability": run_trainability,
        "directional": run_directional,
    }
    sys.exit(protocols[args.protocol](args))


if __name__ == "__main__":
    main()
