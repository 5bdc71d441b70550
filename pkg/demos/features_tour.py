# coding: utf-8

# # From a waveform to a stacked cepstral feature matrix
#
# This walk-through synthesises a short clip, cuts it into 4 s segments and
# turns each segment into the (frames, 100) matrix the classifier consumes.

import numpy as np

from pipmn import dsp

rate = dsp.SAMPLE_RATE
t = np.arange(int(10.5 * rate)) / rate
chirp = 0.3 * np.sin(2 * np.pi * (200 + 150 * t) * t)
clip = dsp.Waveform(chirp + 0.01 * np.random.default_rng(0).standard_normal(t.size), rate)

# A 10.5 s clip gives three segments: two full windows and a zero-padded tail.

segments = dsp.segment_clip(clip, 4.0)
print("segments:", len(segments), [len(s.samples) for s in segments])

# Frame geometry: 25 ms Hamming windows with a 10 ms hop, zero-padded to 1024.

win, hop = dsp.frame_geometry(rate)
print("window", win, "hop", hop, "frames per 4 s segment", dsp.n_frames(len(segments[0].samples)))

# Five filterbank families, 40 filters each, share one power spectrogram.
# Each family contributes 20 cepstral coefficients.

power = dsp.stft_power(segments[0])
print("power spectrogram", power.shape)
for family in dsp.STACK_ORDER:
    fb = dsp.filterbank(family, rate, 40, 1024)
    print(f"  {family:<11} filters {fb.shape}  peak bin of filter 20: {fb[20].argmax()}")

# The stacked matrix, in the order gammachirp | mel | gammatone | linear | bark.

feats = dsp.extract(segments[0], "stack")
print("stack", feats.shape, "finite:", bool(np.all(np.isfinite(feats))))

# The two alternative inputs used in the ablation grid.

print("mfcc50", dsp.extract(segments[0], "mfcc50").shape)
print("mel100", dsp.extract(segments[0], "mel100").shape)

# Feature matrices are cached as small binary files; the round trip is exact.

import tempfile, os
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "seg.pipf")
    dsp.write_pipf(path, feats)
    print("bit exact:", dsp.read_pipf(path).tobytes() == feats.astype("<f4").tobytes())
