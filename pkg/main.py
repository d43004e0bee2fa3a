"""
Hawkes 曝光整形工具主程序

子命令：generate | validate-rate | campaign | predict-pairs | certify
"""
import argparse
import logging
import os
import sys

import numpy as np

import config
from modules import harness, utils
from modules.hawkes import GEN_STREAM, StageSchedule, make_rng
from modules.modelio import emit_model, ingest_model

# 配置日志
logging.basicConfig(format='%(asctime)s - %(message)s', level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger(__name__)

# 过滤掉不必要的日志
for name in ['numba', 'matplotlib', 'asyncio']:
    logging.getLogger(name).setLevel(logging.ERROR)


def generate_command(args) -> int:
    """生成合成实例并写出模型文件"""
    inst = harness.generate_synthetic(args.n, args.seed, args.M, args.literal_scaling)
    out = args.out or os.path.join(args.out_dir, f"model_n{args.n}_s{args.seed}.txt")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    emit_model(out, inst.model, T=args.T, M=args.M)
    print(utils.format_summary("合成实例", [
        ("用户数", str(inst.model.n)),
        ("稳定性比 ρ(A)/ω", f"{inst.model.stability_ratio:.4f}"),
        ("A 非零比例", f"{np.count_nonzero(inst.model.A) / inst.model.n ** 2:.3f}"),
        ("模型文件", out),
    ]))
    return 0


def validate_rate_command(args) -> int:
    """均值强度 vs 仿真"""
    if args.config:
        exp = harness.load_experiment_config(args.config)
        model = ingest_model(exp.model_path).model if exp.model_path else harness.generate_synthetic(exp.n, exp.seed).model
    else:
        model = harness.generate_synthetic(args.n, args.seed).model
    runs = [args.replications] if args.replications else list(harness.SWEEP_RUNS)
    exo, bound = harness.make_exo_profile(args.profile, model.n, args.T, args.seed)
    reports = [harness.validate_rate(model, args.profile, R, args.probes, args.T, args.seed, exo, bound) for R in runs]

    stem = os.path.join(args.out_dir, f"rate_{args.profile}_s{args.seed}")
    utils.write_frame(stem + ".csv", harness.rate_frame(reports, users=range(min(3, model.n))))
    cfg = {"command": "validate-rate", "config": args.config, "profile": args.profile, "n": model.n,
           "T": args.T, "runs": runs, "probes": args.probes, "seed": args.seed}
    utils.write_json(stem + ".json", utils.stamped(cfg, reports=[
        {"runs": r.runs, "relative_error": r.relative_error, "coverage": r.coverage} for r in reports
    ]))
    print(utils.format_summary(f"速率校验 {args.profile}", [
        (f"R={r.runs}", f"相对误差 {r.relative_error:.4f} | 3SE 覆盖率 {r.coverage:.3f}") for r in reports
    ]))
    return 0


def campaign_command(args) -> int:
    """活动基准实验"""
    methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else None
    cfg = harness.load_experiment_config(
        args.config, objective=args.objective, n=args.n, M=args.M, T=args.T, seed=args.seed,
        replications=args.replications, mode=args.mode, methods=methods,
        literal_scaling=True if args.literal_scaling else None,
    )
    report, rows = harness.run_campaign_experiment(cfg)
    path = harness.write_experiment_report(report, rows, args.out_dir)

    lines = []
    for method, stats in report.methods.items():
        if stats["raw"]:
            lines.append((method, f"{stats['mean']:.4f} ± {stats['std']:.4f}"))
        else:
            lines.append((method, f"❌ 失败: {stats['failures'][0]['message'] if stats['failures'] else '无结果'}"))
    lines.append(("报告", path))
    print(utils.format_summary(f"{cfg.objective} 活动实验", lines))
    return 0 if all(s["success"] for s in report.methods.values()) else 1


def predict_pairs_command(args) -> int:
    """级联对预测"""
    if args.cascades:
        b1, b2 = ingest_model(args.cascades[0]), ingest_model(args.cascades[1])
        if b1.stage_mu is None or b2.stage_mu is None:
            print("❌ 级联文件需要 [mu_stage k] 段")
            return 1
        model = b1.model
        M = b1.stage_mu.shape[0]
        T = b1.T or args.T
        rng = make_rng(args.seed, GEN_STREAM, 1)
        constraints, beta, gamma_t = harness.draw_campaign_parameters(rng, model.n, M)
        inst = harness.SyntheticInstance(model, constraints, beta, gamma_t, model.stability_ratio)
        pairs = [(b1.stage_mu, b2.stage_mu)]
    else:
        inst = harness.generate_synthetic(args.n, args.seed, args.M)
        M, T = args.M, args.T
        pairs = harness.random_cascade_pairs(args.n, M, args.pairs, args.seed)

    result = harness.run_cascade_pairs(inst.model, inst.objective(args.objective), inst.constraints,
                                       StageSchedule(M, T), pairs, args.mode)
    path = os.path.join(args.out_dir, f"pairs_{args.objective}_s{args.seed}.json")
    cfg = {"command": "predict-pairs", "cascades": args.cascades, "objective": args.objective, "n": inst.model.n,
           "M": M, "T": T, "pairs": len(pairs), "mode": args.mode, "seed": args.seed}
    utils.write_json(path, utils.stamped(cfg, accuracy=result["accuracy"], skipped=result["skipped"],
                                         decisions=result["decisions"]))
    print(utils.format_summary("级联对预测", [
        ("准确率", f"{result['accuracy']:.3f}"),
        ("阶段判定数", str(len(result["decisions"]))),
        ("输出", path),
    ]))
    return 0


def certify_command(args) -> int:
    """闭式解与均值曝光校验"""
    results = harness.run_certification(args.seed, args.models, args.mc_runs, args.out_dir)
    print(utils.format_summary("校验", [
        (r.name, f"{'✅' if r.passed else '❌'} {r.worst:.3e} / {r.threshold:.0e} {r.detail}".rstrip())
        for r in results
    ]))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Hawkes 网络曝光整形")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=config.DEFAULT_SEED, with_config=False):
        if with_config:
            p.add_argument("--config", help="dotenv 格式的实验配置文件")
        p.add_argument("--seed", type=int, default=seed)
        p.add_argument("--out-dir", default=config.OUT_DIR)

    p = sub.add_parser("generate", help="生成合成实例 → 模型文件")
    common(p)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--M", type=int, default=6)
    p.add_argument("--T", type=float, default=40.0)
    p.add_argument("--out")
    p.add_argument("--literal-scaling", action="store_true")
    p.set_defaults(handler=generate_command)

    p = sub.add_parser("validate-rate", help="均值强度 vs 仿真")
    common(p, with_config=True)
    p.add_argument("--profile", choices=harness.EXO_PROFILES, default="piecewise")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--T", type=float, default=40.0)
    p.add_argument("--replications", type=int, help="不指定时依次跑 5 / 20 / 100 次")
    p.add_argument("--probes", type=int, default=config.DEFAULT_PROBES)
    p.set_defaults(handler=validate_rate_command)

    p = sub.add_parser("campaign", help="活动基准实验")
    common(p, seed=None, with_config=True)
    p.add_argument("--objective", choices=config.OBJECTIVES)
    p.add_argument("--n", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--T", type=float)
    p.add_argument("--replications", type=int)
    p.add_argument("--mode", choices=config.EXPOSURE_MODES)
    p.add_argument("--methods", help="逗号分隔，如 CLL,OPL,RND")
    p.add_argument("--literal-scaling", action="store_true")
    p.set_defaults(handler=campaign_command)

    p = sub.add_parser("predict-pairs", help="级联对预测")
    common(p)
    p.add_argument("--cascades", nargs=2, metavar=("C1", "C2"), help="两个带 [mu_stage k] 的模型文件")
    p.add_argument("--objective", choices=config.OBJECTIVES, default="CEM")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--M", type=int, default=6)
    p.add_argument("--T", type=float, default=40.0)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--mode", choices=config.EXPOSURE_MODES, default="per-stage")
    p.set_defaults(handler=predict_pairs_command)

    p = sub.add_parser("certify", help="闭式解校验套件")
    common(p)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--mc-runs", type=int, default=5000)
    p.set_defaults(handler=certify_command)
    return parser


def main(argv=None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as e:
        logger.error(f"[主程序] {args.command} 失败: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
