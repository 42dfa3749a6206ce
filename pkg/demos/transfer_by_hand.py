"""Moving a detection change from boxed categories to unboxed ones, on a 2-D toy head.

Run: python3 demos/transfer_by_hand.py
"""
import numpy as np

from lsda.adapt import AdaptConfig, adapt_weights, nearest_neighbors
from lsda.model import CategoryPartition, WeightMatrix

# four categories; the first two (alphabetically) have boxes, the last two do not
part = CategoryPartition.create(["apple", "boat", "cherry", "dinghy"], m=2)
print("B:", [part.names[i] for i in part.B], " A:", [part.names[i] for i in part.A])

# classifier rows: cherry points the same way as apple, dinghy the same way as boat
Wc = WeightMatrix(np.array([[1.0, 0.0],    # apple
                            [0.0, 1.0],    # boat
                            [3.0, 0.2],    # cherry
                            [0.1, 0.5]]),  # dinghy
                  np.array([0.1, 0.2, 0.3, 0.4]))

# what fine-tuning changed on the boxed categories
deltaB = WeightMatrix(np.array([[0.5, -0.5],
                                [-1.0, 2.0]]),
                      np.array([-0.2, 0.4]))

# nearest neighbours compare directions only, so cherry's length does not matter
nmap = nearest_neighbors(Wc, part, AdaptConfig(k=1))
print(nmap.to_tsv(part))

for k in (1, 2):
    cfg = AdaptConfig(k=k)
    Wd = adapt_weights(Wc, deltaB, nearest_neighbors(Wc, part, cfg), cfg)
    print(f"k={k}")
    for name, row, b in zip(part.names, Wd.values, Wd.bias):
        print(f"  {name:<7} {np.round(row, 3)}  bias {b:.3f}")

# k=1: cherry borrows apple's change, dinghy borrows boat's
# k=2 (every B category): both A rows receive the mean change
