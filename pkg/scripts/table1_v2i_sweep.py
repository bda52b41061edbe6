"""V2I SNR x K grid with the full ablation (features and report over the channel)."""

from _common import parser, save, setup, show

from semx.orchestrate import RunConfig, sweep

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    scenes, codecs, _ = setup(args)
    res = sweep(scenes, RunConfig(mode="v2i", ablation="full", seed=args.seed), (0.0, 10.0, 20.0), (1, 5, 10), codecs)
    cols, rows = res.table()
    show(cols, rows)
    save(args.out, "v2i_table.csv", cols, rows)
