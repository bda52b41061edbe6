"""ADE/FDE/RMSE versus prediction steps (10..50) per mode, K=5 at 20 dB."""

from _common import parser, save, setup, show

from semx.channel import ChannelConfig
from semx.orchestrate import HORIZON_HEADER, RunConfig, horizon_sweep
from semx.predict import PredictorConfig

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--snr", type=float, default=20.0)
    args = p.parse_args()
    scenes, codecs, bounds = setup(args, kinds=("fr", "sr", "pr"))
    for mode in ("v2i", "v2v"):
        cfg = RunConfig(mode=mode, ablation="full", channel=ChannelConfig(snr_db=args.snr),
                        predictor=PredictorConfig(K=args.K), seed=args.seed, pr_bounds=bounds)
        rows = horizon_sweep(scenes, cfg, codecs=codecs)
        print(f"[{mode}]")
        show(HORIZON_HEADER, rows)
        save(args.out, f"horizon_{mode}.csv", HORIZON_HEADER, rows)
