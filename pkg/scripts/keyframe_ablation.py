"""Frame-drop sequence with and without the previous-frame keyframe rule."""
import argparse
import dataclasses

from monovo import runner
from monovo.config import load_preset
from monovo.evalmetrics import tracking_stats


def run(cfg, previous_frame_rule: bool):
    cfg = dataclasses.replace(cfg, backend=dataclasses.replace(cfg.backend, previous_frame_rule=previous_frame_rule))
    cam, frames = runner.simulate(cfg)
    odo = runner.run_odometry(cfg, cam, frames)
    row = {f.frame_index: k for k, f in enumerate(frames)}
    drops = [(s, n) for s, n in cfg.noise.frame_drop if n >= 2]
    before = sum(odo.status[row[s - 1]].keyframe for s, _ in drops if s - 1 in row)
    return tracking_stats(odo.status), before, len(drops)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="frame_drop")
    ap.add_argument("--seeds", type=int, nargs="+", default=None, help="override the preset seed")
    ap.add_argument("--min-active-landmarks", type=int, default=None,
                    help="override the low-map keyframe fallback (0 disables it)")
    args = ap.parse_args(argv)
    base = load_preset(args.config)
    if args.min_active_landmarks is not None:
        base = dataclasses.replace(base, backend=dataclasses.replace(
            base.backend, min_active_landmarks=args.min_active_landmarks))
    for seed in args.seeds or [base.seed]:
        cfg = base.with_seed(seed)
        for rule in (True, False):
            st, before, n = run(cfg, rule)
            name = "previous-frame" if rule else "current-frame "
            print(f"seed {seed}  {name}  failures {st.failure_count}  longest {st.longest_fraction:.3f}  "
                  f"keyframe before drop {before}/{n}")


if __name__ == "__main__":
    main()
