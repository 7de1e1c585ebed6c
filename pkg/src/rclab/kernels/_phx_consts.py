"""Philox4x32-10 round constants, shared by both backends."""

import numpy as np

M0 = np.uint64(0xD2511F53)
M1 = np.uint64(0xCD9E8D57)
W0 = np.uint64(0x9E3779B9)
W1 = np.uint64(0xBB67AE85)
MASK32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
S11 = np.uint64(11)
TWO_NEG53 = 2.0 ** -53
TWO_PI = 2.0 * np.pi
