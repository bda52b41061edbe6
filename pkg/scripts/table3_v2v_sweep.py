"""V2V SNR x K grid: vehicles exchange predicted trajectories over the channel."""

from _common import parser, save, setup, show

from semx.orchestrate import RunConfig, sweep

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--rounds", type=int, default=2)
    args = p.parse_args()
    scenes, codecs, bounds = setup(args, kinds=("pr",))
    cfg = RunConfig(mode="v2v", ablation="full", seed=args.seed, v2v_rounds=args.rounds, pr_bounds=bounds)
    res = sweep(scenes, cfg, (0.0, 10.0, 20.0), (1, 5, 10), codecs)
    cols, rows = res.table()
    show(cols, rows)
    save(args.out, "v2v_table.csv", cols, rows)
