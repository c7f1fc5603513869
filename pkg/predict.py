#
# Query a trained CKM checkpoint for the channel gain and its position
# gradient at one or more locations.
#
import argparse
import json

import numpy as np

from ckmplan.model.builder import load_model


def predict(args):
    model = load_model(args.checkpoint)
    points = np.asarray(args.point, dtype=np.float64).reshape(-1, 2)

    gain, grad = model.gain_linear_gradient(points)
    gain_db = 10.0 * np.log10(gain)
    for q, g, g_db, dg in zip(points, gain, gain_db, grad):
        record = {"x_m": q[0], "y_m": q[1], "gain": g, "gain_db": g_db, "d_gain_dx": dg[0], "d_gain_dy": dg[1]}
        if args.json:
            print(json.dumps({k: float(v) for k, v in record.items()}))
        else:
            print(f"q=({q[0]:.2f}, {q[1]:.2f}) m  H={g:.6e} ({g_db:.2f} dB)  dH/dq=({dg[0]:.4e}, {dg[1]:.4e}) 1/m")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", type=str, required=True, help="location of a trained model checkpoint")
    parser.add_argument("--point", type=float, nargs=2, action="append", required=True,
                        help="query location x y in meters, repeatable")
    parser.add_argument("--json", action="store_true", help="print one JSON object per location")
    args = parser.parse_args()

    predict(args)
