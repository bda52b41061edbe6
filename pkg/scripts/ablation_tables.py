"""Mean ADE/FDE/RMSE per ablation for both modes at one SNR and K."""

from _common import parser, save, setup, show

from semx.experiments import ablation_table

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--snr", type=float, default=20.0)
    p.add_argument("--K", type=int, default=5)
    args = p.parse_args()
    scenes, codecs, _ = setup(args, kinds=("fr", "sr", "pr"))
    header = ("ablation", "ade", "fde", "rmse")
    for mode in ("v2i", "v2v"):
        rows = ablation_table(scenes, codecs, mode, args.snr, args.K, args.seed)
        print(f"[{mode}]")
        show(header, rows)
        save(args.out, f"ablation_{mode}.csv", header, rows)
