"""16-bit binary PGM (P5) image files with calibration metadata.

Header comment lines carry the physical calibration::

    P5
    # pitch_um=0.92
    # psf_ax_um=2.23
    # psf_rad_um=2.09
    260 64
    65535
    <big-endian uint16 samples>

The pitch comment is mandatory; write followed by read restores the
image bit for bit.
"""

import os
import tempfile

import numpy as np

from .imaging import FluorescenceImage


class ImageFormatError(ValueError):
    pass


def _tokenize_header(data):
    """Yield whitespace-separated header tokens, collecting '#' comments."""
    comments = []
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ImageFormatError("truncated header")
        ch = data[i:i + 1]
        if ch == b"#":
            j = data.find(b"\n", i)
            if j < 0:
                raise ImageFormatError("unterminated comment")
            comments.append(data[i + 1:j].decode("ascii", "replace").strip())
            i = j + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j].decode("ascii"))
            i = j
    return tokens, comments, i + 1  # payload starts after one whitespace byte


def _parse_comments(comments, path):
    meta = {}
    for line in comments:
        if "=" in line:
            key, _, val = line.partition("=")
            try:
                meta[key.strip()] = float(val)
            except ValueError:
                pass
    if "pitch_um" not in meta:
        raise ImageFormatError(
            f"{path}: missing '# pitch_um=...' header comment; add the pixel "
            "pitch in micrometres to the PGM header")
    return meta


def read_image(path):
    """Read a 16-bit P5 PGM with calibration comments into a FluorescenceImage."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM (magic 'P5' missing)")
    tokens, comments, offset = _tokenize_header(data)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header: {exc}") from None
    if maxval != 65535:
        raise ImageFormatError(
            f"{path}: unsupported sample depth (maxval {maxval}); only 16-bit "
            "images (maxval 65535) are handled")
    need = width * height * 2
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    meta = _parse_comments(comments, path)
    counts = np.frombuffer(payload, dtype=">u2").reshape(height, width)
    return FluorescenceImage(
        intensities=counts.astype(np.uint16),
        pixel_pitch=meta["pitch_um"] * 1e-6,
        psf_sigma_ax=meta.get("psf_ax_um", 2.23) * 1e-6,
        psf_sigma_rad=meta.get("psf_rad_um", 2.09) * 1e-6,
        metadata={"comments": comments},
    )


def write_image(image, path):
    """Write a FluorescenceImage as 16-bit P5 PGM (atomic: temp + rename)."""
    counts = np.asarray(image.intensities)
    if np.any(counts < 0):
        raise ValueError("negative counts cannot be written")
    rounded = np.rint(counts)
    if rounded.max(initial=0) > 65535:
        raise ValueError("counts exceed the 16-bit sample range")
    header = (
        "P5\n"
        f"# pitch_um={image.pixel_pitch * 1e6!r}\n"
        f"# psf_ax_um={image.psf_sigma_ax * 1e6!r}\n"
        f"# psf_rad_um={image.psf_sigma_rad * 1e6!r}\n"
        f"{image.width} {image.height}\n"
        "65535\n"
    ).encode("ascii")
    payload = rounded.astype(">u2").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".pgm.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
