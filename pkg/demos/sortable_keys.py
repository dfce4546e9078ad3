"""
Why interleaved keys sort similar series together
=================================================

Four 2-segment words with 3 bits per segment. Sorting the words as plain
strings groups them by their first segment only; sorting their interleaved
keys walks a z-order curve, so neighbours in the sorted list are neighbours
in both segments.
"""

import numpy as np

from coconut_index import invert_sum, restore_sum

letters = "abcdefgh"
texts = ["ec", "ee", "fc", "ge"]
words = np.array([[letters.index(c) for c in t] for t in texts], dtype=np.uint8)

# %%
# Each key holds the top bit of every segment, then the next bit, and so on.
keys = invert_sum(words, 3)
for t, w, k in zip(texts, words, keys):
    bits = format(int.from_bytes(k.tobytes(), "big") >> 2, "06b")
    print(f"{t}: codes {w.tolist()}  key bits {bits}")

# %%
# Plain string order against key order
print("string order:", sorted(texts))
print("key order   :", [texts[i] for i in np.lexsort(keys.T[::-1])])

# %%
# The transform is lossless
assert np.array_equal(restore_sum(keys, 2, 3), words)
