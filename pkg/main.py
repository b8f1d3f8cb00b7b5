#!/usr/bin/env python3
"""
KGE-A3C 实验主程序
训练、评估、多智能体比较、回合演示与知识图谱检查
"""

import argparse
import os
import signal
import sys
import threading
from typing import List, Optional
from config.config import ExperimentConfig
from utils.image_utils import ImageProcessor
from utils.logger import rl_logger, setup_logger
from modules.a3c import A3CTrainer, read_best_pointer
from modules.checkpoint import load_checkpoint
from modules.controllers import RandomController, ScriptedReacher, play_episode
from modules.evalstats import (
    AgentSummary,
    checkpoint_controller,
    compare_agents,
    evaluation_seeds,
    post_train_eval,
    success_rate_runs,
    write_report,
)
from modules.kge import build_scene_embedder
from modules.reach_arena import ReachArena, TraceWriter

SCRIPTED_POLICIES = ("scripted", "random")


class ExperimentRunner:
    """按命令组织一次实验：加载配置、准备输出目录、执行命令"""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = ExperimentConfig(args.config)
        self._apply_overrides()
        self.out_dir = args.out or self.config.output_dir

        if threading.current_thread() is threading.main_thread():
            signal.signal(signal.SIGTERM, self._signal_handler)

    def _signal_handler(self, signum, frame):
        """SIGTERM 按中断处理，训练会先保存最新检查点"""
        rl_logger.info("接收到退出信号，正在停止...")
        raise KeyboardInterrupt

    def _apply_overrides(self):
        args, cfg = self.args, self.config
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.eval.seed = args.seed
        if args.steps is not None:
            cfg.train.total_steps = args.steps
        if args.workers is not None:
            cfg.train.n_workers = args.workers
        cfg.validate()

    def _start_logging(self, directory: str):
        setup_logger(
            log_dir=os.path.join(directory, self.config.system.log_dir),
            level=self.config.system.log_level,
        )

    # ------------------------------------------------------------ train
    def train(self) -> int:
        run_dir = self.out_dir
        os.makedirs(run_dir, exist_ok=True)
        self._start_logging(run_dir)
        self.config.output_dir = run_dir
        self.config.save_to_file(os.path.join(run_dir, "config.yaml"))
        rl_logger.info(f"运行目录: {run_dir}")

        summary = A3CTrainer(self.config, run_dir).train()
        print(f"best_step={summary.best.step} best_checkpoint={summary.best.checkpoint_path}")
        return 0

    # ------------------------------------------------------------ eval
    def _checkpoint_path(self) -> str:
        if self.args.checkpoint:
            return self.args.checkpoint
        return read_best_pointer(self.config.output_dir)

    def evaluate(self) -> int:
        os.makedirs(self.out_dir, exist_ok=True)
        self._start_logging(self.out_dir)
        cfg = self.config

        checkpoint = self._checkpoint_path()
        if checkpoint in SCRIPTED_POLICIES:
            controller = ScriptedReacher() if checkpoint == "scripted" else RandomController(cfg.eval.seed)
        else:
            controller = checkpoint_controller(checkpoint, cfg)

        report = post_train_eval(
            controller,
            cfg.env,
            n=cfg.eval.episodes,
            dist_thr=cfg.eval.dist_threshold,
            deg_thr=cfg.eval.deg_threshold,
            seed=cfg.eval.seed,
            episodes_csv=os.path.join(self.out_dir, "episodes.csv"),
        )
        write_report(
            report,
            os.path.join(self.out_dir, "report.csv"),
            os.path.join(self.out_dir, "report.txt"),
            joint_ranges=cfg.env.joint_ranges,
            bins=cfg.eval.histogram_bins,
        )
        print(f"accuracy={report.accuracy:.2f}")
        return 0

    # ------------------------------------------------------------ compare
    def compare(self) -> int:
        run_dirs: List[str] = self.args.runs
        if len(run_dirs) < 2:
            raise ValueError("compare 至少需要两个运行目录")
        os.makedirs(self.out_dir, exist_ok=True)
        self._start_logging(self.out_dir)
        eval_cfg = self.config.eval

        summaries = []
        for run_dir in run_dirs:
            if not os.path.isdir(run_dir):
                raise FileNotFoundError(f"运行目录不存在: {run_dir}")
            run_cfg = ExperimentConfig.from_snapshot(os.path.join(run_dir, "config.yaml"))
            checkpoint = read_best_pointer(run_dir)
            best_step = load_checkpoint(checkpoint, run_cfg.agent).step
            controller = checkpoint_controller(checkpoint, run_cfg, greedy=eval_cfg.greedy)

            name = os.path.basename(os.path.normpath(run_dir))
            rl_logger.info(f"评估 {name}: {checkpoint}")
            report = post_train_eval(
                controller,
                run_cfg.env,
                n=eval_cfg.episodes,
                dist_thr=eval_cfg.dist_threshold,
                deg_thr=eval_cfg.deg_threshold,
                seed=eval_cfg.seed,
            )
            rates = success_rate_runs(
                controller,
                run_cfg.env,
                eval_cfg.anova_runs,
                eval_cfg.anova_episodes,
                eval_cfg.dist_threshold,
                eval_cfg.deg_threshold,
                eval_cfg.seed,
            )
            summaries.append(AgentSummary(name, report.accuracy, best_step, rates))

        table = compare_agents(summaries)
        table.to_csv(os.path.join(self.out_dir, "comparison.csv"))
        text = table.to_text()
        with open(os.path.join(self.out_dir, "comparison.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        print(text, end="")
        return 0

    # ------------------------------------------------------------ demo
    def demo(self) -> int:
        os.makedirs(self.out_dir, exist_ok=True)
        self._start_logging(self.out_dir)
        cfg = self.config

        checkpoint = self.args.checkpoint or "scripted"
        if checkpoint == "scripted":
            controller = ScriptedReacher()
        elif checkpoint == "random":
            controller = RandomController(cfg.eval.seed)
        else:
            controller = checkpoint_controller(checkpoint, cfg)

        env = ReachArena(cfg.env)
        seed = evaluation_seeds(cfg.eval.seed, 1)[0]
        frames = []

        def on_frame(step: int, image):
            # 只保存每一步动作之后的画面
            if step > 0:
                frames.append(image)

        images = ImageProcessor()
        frame_dir = os.path.join(self.out_dir, "frames")
        with TraceWriter(os.path.join(self.out_dir, "trace.csv"), env.n_joints) as trace:
            result = play_episode(env, controller, seed, trace=trace, on_frame=on_frame)

        for i, frame in enumerate(frames):
            images.save_ppm(frame, os.path.join(frame_dir, f"frame_{i + 1:03d}.ppm"))
        images.save_ppm(images.make_strip(frames), os.path.join(self.out_dir, "strip.ppm"))

        rl_logger.info(
            f"演示回合 ({controller.name}): 目标 {result.target_kind}/{result.realized_color}，"
            f"{result.steps} 步，回报 {result.total_return:.2f}，成功 {result.success}"
        )
        print(f"steps={result.steps} success={int(result.success)} frames={len(frames)}")
        return 0

    # ------------------------------------------------------------ kg-inspect
    def kg_inspect(self) -> int:
        cfg = self.config
        embedder = build_scene_embedder(cfg.kge, cfg.env)
        subgraph, sentence = embedder.describe()

        print(f"mode: {cfg.kge.mode}  dr_colors: {cfg.env.dr_colors}  kge_dim: {embedder.kge_dim}")
        print(f"perceived: {', '.join(embedder.perceived) or '-'}")
        print(f"triples ({len(subgraph)}):")
        for triple in sorted(subgraph.triples):
            print(f"  {triple.head}\t{triple.relation}\t{triple.tail}")
        print(f"sentence: {sentence}")
        embedding = embedder.static()
        if embedding is not None:
            print(
                f"embedding: {len(embedding)} values, {embedding.unknown_tokens} unknown tokens, "
                f"{embedding.dropped_tokens} dropped tokens"
            )
        return 0


class CommandLineParser(argparse.ArgumentParser):
    """参数错误抛出 ValueError，由 main() 统一输出单行错误"""

    def error(self, message: str):
        raise ValueError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(description="KGE-A3C 实验命令行")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser):
        sub.add_argument("--config", required=True, help="实验配置 YAML 文件")
        sub.add_argument("--seed", type=int, default=None, help="覆盖随机种子")
        sub.add_argument("--steps", type=int, default=None, help="覆盖总训练步数")
        sub.add_argument("--workers", type=int, default=None, help="覆盖工作线程数")
        sub.add_argument(
            "--checkpoint", default=None, help="检查点路径，或 scripted / random（eval、demo）"
        )
        sub.add_argument("--out", default=None, help="输出目录")

    for name, help_text in (
        ("train", "训练智能体"),
        ("eval", "训练后评估"),
        ("demo", "演示一个回合并输出帧图像"),
        ("kg-inspect", "打印场景子图与线性化句子"),
    ):
        add_common(subparsers.add_parser(name, help=help_text))

    compare = subparsers.add_parser("compare", help="比较多个运行目录（BM / partial / full）")
    add_common(compare)
    compare.add_argument("runs", nargs="+", help="运行目录")

    return parser


COMMANDS = {
    "train": ExperimentRunner.train,
    "eval": ExperimentRunner.evaluate,
    "compare": ExperimentRunner.compare,
    "demo": ExperimentRunner.demo,
    "kg-inspect": ExperimentRunner.kg_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    """主函数：成功返回 0；失败时在 stderr 输出一行错误并返回 1"""
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        runner = ExperimentRunner(args)
        return COMMANDS[command](runner)
    except KeyboardInterrupt:
        print("error: KeyboardInterrupt: 用户中断", file=sys.stderr)
        return 130
    except Exception as e:
        rl_logger.debug(f"命令 {command} 失败: {e!r}")
        message = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
