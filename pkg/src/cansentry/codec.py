"""CAN frame codec: log parsing, bit-field extraction, and physical scaling.

Bit numbering convention (default, "msb_first"): bit index b lives in byte
b // 8 at in-byte position 7 - (b % 8), i.e. MSB-first within a byte and
big-endian across bytes. Equivalently, with the payload zero-padded to 8
bytes and read as a big-endian 64-bit integer P, a field spanning bits
start .. start+length-1 is

    raw = (P >> (64 - start - length)) & ((1 << length) - 1)

An alternative "lsb_first" (Intel) numbering is supported per catalog for
logs produced with the opposite convention.

Physical scaling: scaled = offset + scale * raw, and the inverse rounds to
the nearest raw step.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

from .errors import CatalogError, CodecError, LogParseError

MSB_FIRST = "msb_first"
LSB_FIRST = "lsb_first"

# Fixed message order used for timestamp tie-breaking and emission interleaving.
MESSAGE_ORDER = ("EMS11", "EMS12", "EMS14", "EMS16", "SAS11")
MESSAGE_IDS = {"EMS11": 790, "EMS12": 809, "EMS14": 1349, "EMS16": 608, "SAS11": 688}
MESSAGE_DLC = 8

_EPS = 1e-9


@dataclass(frozen=True)
class RawFrame:
    """One logged CAN frame: 11-bit id, payload of exactly dlc bytes, timestamp."""

    can_id: int
    dlc: int
    data: bytes
    timestamp: float

    def __post_init__(self):
        if not 0 <= self.can_id < 2048:
            raise CodecError(f"can_id {self.can_id} outside 11-bit range")
        if not 0 <= self.dlc <= 8:
            raise CodecError(f"dlc {self.dlc} outside 0..8")
        if len(self.data) != self.dlc:
            raise CodecError(f"data length {len(self.data)} != dlc {self.dlc}")
        if self.timestamp < 0:
            raise CodecError(f"negative timestamp {self.timestamp}")


@dataclass
class Trace:
    """An ordered sequence of frames with non-decreasing timestamps."""

    frames: list[RawFrame] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def duration(self) -> float:
        return self.frames[-1].timestamp if self.frames else 0.0

    def count_id(self, can_id: int) -> int:
        return sum(1 for f in self.frames if f.can_id == can_id)


@dataclass(frozen=True)
class SignalSpec:
    """Decoding metadata for one signal within a monitored message."""

    feature_no: int
    message_name: str
    message_id: int
    signal_name: str
    start_bit: int
    bit_length: int
    scale: float
    offset: float
    min_value: float
    max_value: float
    correlated_with: frozenset[int] = frozenset()
    max_deviation: float = 0.0

    @property
    def qualified_name(self) -> str:
        return f"{self.message_name}.{self.signal_name}"

    @property
    def raw_max(self) -> int:
        return (1 << self.bit_length) - 1

    def byte_span(self) -> tuple[int, int]:
        """First and last payload byte index (0-based) touched by the field."""
        return self.start_bit // 8, (self.start_bit + self.bit_length - 1) // 8

    def raw_bounds_in_range(self) -> tuple[int, int]:
        """Smallest/largest raw value whose scaled value lies in [min, max].

        Offsets can push raw 0 below min_value (e.g. a negative offset with a
        non-negative range), so the usable raw window may be narrower than the
        full bit width.
        """
        lo = math.ceil((self.min_value - self.offset) / self.scale - _EPS)
        hi = math.floor((self.max_value - self.offset) / self.scale + _EPS)
        lo = max(0, lo)
        hi = min(self.raw_max, hi)
        if lo > hi:
            raise CatalogError(
                f"{self.qualified_name}: no raw value maps into "
                f"[{self.min_value}, {self.max_value}]"
            )
        return lo, hi

    def scaled_bounds_achievable(self) -> tuple[float, float]:
        """Lowest/highest scaled values reachable by an in-range raw value."""
        lo, hi = self.raw_bounds_in_range()
        return scale_signal(lo, self), scale_signal(hi, self)


def _validate_spec(spec: SignalSpec, dlc: int = MESSAGE_DLC) -> None:
    if spec.start_bit < 0 or not 1 <= spec.bit_length <= 16:
        raise CatalogError(f"{spec.qualified_name}: bad bit range")
    if spec.start_bit + spec.bit_length > 8 * dlc:
        raise CatalogError(f"{spec.qualified_name}: field exceeds {dlc}-byte payload")
    if spec.scale <= 0:
        raise CatalogError(f"{spec.qualified_name}: scale must be positive")
    if spec.min_value > spec.max_value:
        raise CatalogError(f"{spec.qualified_name}: min > max")
    top = scale_signal(spec.raw_max, spec)
    if abs(top - spec.max_value) > spec.scale + _EPS:
        raise CatalogError(
            f"{spec.qualified_name}: all-ones raw decodes to {top}, more than one "
            f"scale step from max {spec.max_value}"
        )


@dataclass
class SignalCatalog:
    """Ordered signal specs with dense feature indices plus lookup tables."""

    specs: list[SignalSpec]
    bit_numbering: str = MSB_FIRST

    def __post_init__(self):
        if self.bit_numbering not in (MSB_FIRST, LSB_FIRST):
            raise CatalogError(f"unknown bit numbering {self.bit_numbering!r}")
        indices = [s.feature_no for s in self.specs]
        if indices != list(range(1, len(self.specs) + 1)):
            raise CatalogError("feature indices must be dense 1..N in order")
        for s in self.specs:
            _validate_spec(s)
        self._by_feature = {s.feature_no: s for s in self.specs}
        self._by_qualified = {s.qualified_name: s for s in self.specs}
        self._by_message: dict[int, list[SignalSpec]] = {}
        for s in self.specs:
            self._by_message.setdefault(s.message_id, []).append(s)

    def __len__(self):
        return len(self.specs)

    def __iter__(self):
        return iter(self.specs)

    @property
    def monitored_messages(self) -> set[int]:
        return set(self._by_message)

    def by_feature(self, feature_no: int) -> SignalSpec:
        try:
            return self._by_feature[feature_no]
        except KeyError:
            raise CatalogError(f"no feature {feature_no}") from None

    def by_name(self, name: str) -> SignalSpec:
        """Look up a signal by 'SIGNAL' or qualified 'MESSAGE.SIGNAL' name."""
        if "." in name:
            try:
                return self._by_qualified[name]
            except KeyError:
                raise CatalogError(f"no signal {name!r}") from None
        matches = [s for s in self.specs if s.signal_name == name]
        if not matches:
            raise CatalogError(f"no signal {name!r}")
        if len(matches) > 1:
            options = ", ".join(s.qualified_name for s in matches)
            raise CatalogError(f"signal {name!r} is ambiguous; use one of: {options}")
        return matches[0]

    def specs_for_message(self, can_id: int) -> list[SignalSpec]:
        return self._by_message.get(can_id, [])

    def message_names(self) -> dict[int, str]:
        return {s.message_id: s.message_name for s in self.specs}


# Table-driven default catalog for the five monitored KIA messages.
# Columns: feature_no, message, id, signal, start_bit, bit_length, scale,
# offset, min, max, correlated feature indices, max deviation.
# Scales are exact binary rationals chosen so the top of the raw range lands
# on the catalog max (or one step above it for ranges that reserve the
# all-ones pattern, e.g. VS and SAS_SPEED).
_DEFAULT_ROWS = [
    (1, "EMS11", 790, "TQI_COR_STAT", 4, 2, 1.0, 0.0, 0.0, 3.0, (2, 4, 10, 11, 14, 15), 0.38),
    (2, "EMS11", 790, "TQI_ACOR", 8, 8, 0.390625, 0.0, 0.0, 99.61, (1, 4, 10, 11, 13, 14, 15), 0.13),
    (3, "EMS11", 790, "N", 16, 16, 0.25, 0.0, 0.0, 16383.75, (5, 6, 10, 11, 16), 0.06),
    (4, "EMS11", 790, "TQI", 32, 8, 0.390625, 0.0, 0.0, 99.61, (1, 2, 10, 11, 13, 14, 15), 0.13),
    (5, "EMS11", 790, "TQFR", 40, 8, 0.390625, 0.0, 0.0, 99.61, (3, 6, 16), 0.06),
    (6, "EMS11", 790, "VS", 48, 8, 1.0, 0.0, 0.0, 254.0, (3, 5, 16), 0.30),
    (7, "EMS12", 809, "MUL_CODE", 6, 2, 1.0, 0.0, 0.0, 3.0, (), 0.54),
    (8, "EMS12", 809, "TEMP_ENG", 8, 8, 0.75, -48.0, 0.0, 143.25, (), 0.03),
    (9, "EMS12", 809, "BRAKE_ACT", 32, 2, 1.0, 0.0, 0.0, 3.0, (), 0.37),
    (10, "EMS12", 809, "TPS", 40, 8, 0.46875, -15.02, 0.0, 104.69, (1, 2, 3, 4, 11, 14, 15), 0.10),
    (11, "EMS12", 809, "PV_AV_CAN", 48, 8, 0.390625, 0.0, 0.0, 99.61, (1, 2, 3, 4, 10, 14, 15), 0.06),
    (12, "EMS14", 1349, "VB", 24, 8, 0.1015625, 0.0, 0.0, 25.90, (), 0.03),
    (13, "EMS16", 608, "TQI_MIN", 0, 8, 0.390625, 0.0, 0.0, 99.61, (2, 4, 14, 15), 0.11),
    (14, "EMS16", 608, "TQI", 8, 8, 0.390625, 0.0, 0.0, 99.61, (1, 2, 4, 10, 11, 13, 15), 0.13),
    (15, "EMS16", 608, "TQI_TARGET", 16, 8, 0.390625, 0.0, 0.0, 99.61, (1, 2, 4, 10, 11, 13, 14), 0.13),
    (16, "EMS16", 608, "TQI_MAX", 40, 8, 0.390625, 0.0, 0.0, 99.61, (3, 5, 6), 0.07),
    (17, "SAS11", 688, "SAS_ANGLE", 0, 16, 0.05, 0.0, 0.0, 3276.80, (), 0.02),
    (18, "SAS11", 688, "SAS_SPEED", 16, 8, 4.0, 0.0, 0.0, 1016.0, (), 0.74),
    (19, "SAS11", 688, "MSGCOUNT", 32, 4, 1.0, 0.0, 0.0, 15.0, (20,), 0.45),
    (20, "SAS11", 688, "CHECKSUM", 36, 4, 1.0, 0.0, 0.0, 15.0, (19,), 0.45),
]


def default_catalog() -> SignalCatalog:
    """The shipped 20-signal catalog for EMS11/EMS12/EMS14/EMS16/SAS11."""
    specs = [
        SignalSpec(n, msg, mid, sig, sb, bl, sc, off, lo, hi, frozenset(corr), dev)
        for (n, msg, mid, sig, sb, bl, sc, off, lo, hi, corr, dev) in _DEFAULT_ROWS
    ]
    return SignalCatalog(specs)


# ---------------------------------------------------------------------------
# Log format: one frame per line,
#   ID(4 hex)  DLC  DATA0..DATA7 (2 hex each)  TIMESTAMP (6-decimal seconds)
# Bytes beyond DLC are padding and written as 00.
# ---------------------------------------------------------------------------

def parse_log(text_stream) -> Trace:
    """Parse a trace log from an iterable of lines (or a whole string).

    Frames are returned in file order with timestamps exactly as parsed;
    frames with unmonitored ids are kept (filtering happens downstream).
    Raises LogParseError naming the 1-based line number on malformed hex,
    DLC > 8, wrong column count, or a timestamp going backwards.
    """
    if isinstance(text_stream, str):
        text_stream = io.StringIO(text_stream)
    frames: list[RawFrame] = []
    prev_ts = None
    for line_no, line in enumerate(text_stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 11:
            raise LogParseError(line_no, f"expected 11 columns, got {len(tokens)}")
        try:
            can_id = int(tokens[0], 16)
        except ValueError:
            raise LogParseError(line_no, f"malformed hex id {tokens[0]!r}") from None
        try:
            dlc = int(tokens[1], 10)
        except ValueError:
            raise LogParseError(line_no, f"malformed DLC {tokens[1]!r}") from None
        if not 0 <= dlc <= 8:
            raise LogParseError(line_no, f"DLC {dlc} outside 0..8")
        data = bytearray()
        for col in tokens[2:10]:
            try:
                byte = int(col, 16)
            except ValueError:
                raise LogParseError(line_no, f"malformed hex byte {col!r}") from None
            if not 0 <= byte <= 255 or len(col) > 2:
                raise LogParseError(line_no, f"byte column {col!r} out of range")
            data.append(byte)
        try:
            ts = float(tokens[10])
        except ValueError:
            raise LogParseError(line_no, f"malformed timestamp {tokens[10]!r}") from None
        if ts < 0:
            raise LogParseError(line_no, f"negative timestamp {ts}")
        if prev_ts is not None and ts < prev_ts:
            raise LogParseError(line_no, f"timestamp {ts} earlier than previous {prev_ts}")
        prev_ts = ts
        if can_id >= 2048:
            raise LogParseError(line_no, f"id {can_id:#x} outside 11-bit range")
        frames.append(RawFrame(can_id, dlc, bytes(data[:dlc]), ts))
    return Trace(frames)


def format_frame(frame: RawFrame) -> str:
    padded = frame.data + b"\x00" * (8 - frame.dlc)
    data_cols = " ".join(f"{b:02x}" for b in padded)
    return f"{frame.can_id:04x} {frame.dlc} {data_cols} {frame.timestamp:.6f}"


def write_log(trace: Trace) -> str:
    """Render a trace in the exact on-disk log format (lowercase hex)."""
    return "".join(format_frame(f) + "\n" for f in trace)


def load_trace(path) -> Trace:
    with open(path, "r", encoding="ascii") as fh:
        return parse_log(fh)


def save_trace(path, trace: Trace) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(write_log(trace))


# ---------------------------------------------------------------------------
# Bit-field access
# ---------------------------------------------------------------------------

def _check_field(frame: RawFrame, spec: SignalSpec) -> None:
    if frame.can_id != spec.message_id:
        raise CodecError(
            f"frame id {frame.can_id} != {spec.qualified_name} message id {spec.message_id}"
        )
    if spec.start_bit + spec.bit_length > 8 * frame.dlc:
        raise CodecError(
            f"{spec.qualified_name} bits {spec.start_bit}.."
            f"{spec.start_bit + spec.bit_length - 1} exceed {frame.dlc}-byte payload"
        )


def extract_raw(frame: RawFrame, spec: SignalSpec, bit_numbering: str = MSB_FIRST) -> int:
    """Unsigned integer held in the spec's bit field of the frame payload."""
    _check_field(frame, spec)
    padded = frame.data + b"\x00" * (8 - frame.dlc)
    mask = (1 << spec.bit_length) - 1
    if bit_numbering == MSB_FIRST:
        word = int.from_bytes(padded, "big")
        shift = 64 - spec.start_bit - spec.bit_length
    elif bit_numbering == LSB_FIRST:
        word = int.from_bytes(padded, "little")
        shift = spec.start_bit
    else:
        raise CodecError(f"unknown bit numbering {bit_numbering!r}")
    return (word >> shift) & mask


def scale_signal(raw_value: int, spec: SignalSpec) -> float:
    """Physical value of a raw field: offset + scale * raw."""
    return spec.offset + spec.scale * raw_value


def encode_signal(scaled: float, spec: SignalSpec) -> int:
    """Nearest raw value for a physical value, rounding half away from zero.

    Accepts the catalog range plus anything the bit field can represent
    (decode(0) .. decode(raw_max) may stick out past [min, max] by up to one
    scale step); values beyond both raise CodecError. The result is clamped
    to the bit width, so scale_signal(encode_signal(x)) is within scale/2
    of x.
    """
    lo = min(spec.min_value, spec.offset)
    hi = max(spec.max_value, spec.offset + spec.scale * spec.raw_max)
    if not lo - _EPS <= scaled <= hi + _EPS:
        raise CodecError(
            f"{spec.qualified_name}: value {scaled} outside [{lo}, {hi}]"
        )
    raw = math.floor((scaled - spec.offset) / spec.scale + 0.5)
    return min(max(raw, 0), spec.raw_max)


def patch_bytes(
    frame: RawFrame, spec: SignalSpec, raw_value: int, bit_numbering: str = MSB_FIRST
) -> RawFrame:
    """Return a copy of the frame with only the spec's bit field rewritten."""
    _check_field(frame, spec)
    if not 0 <= raw_value <= spec.raw_max:
        raise CodecError(f"raw value {raw_value} exceeds {spec.bit_length}-bit field")
    padded = frame.data + b"\x00" * (8 - frame.dlc)
    mask = (1 << spec.bit_length) - 1
    if bit_numbering == MSB_FIRST:
        word = int.from_bytes(padded, "big")
        shift = 64 - spec.start_bit - spec.bit_length
        word = (word & ~(mask << shift)) | (raw_value << shift)
        new_data = word.to_bytes(8, "big")
    elif bit_numbering == LSB_FIRST:
        word = int.from_bytes(padded, "little")
        shift = spec.start_bit
        word = (word & ~(mask << shift)) | (raw_value << shift)
        new_data = word.to_bytes(8, "little")
    else:
        raise CodecError(f"unknown bit numbering {bit_numbering!r}")
    return replace(frame, data=new_data[: frame.dlc])


def decode_signal(frame: RawFrame, spec: SignalSpec, bit_numbering: str = MSB_FIRST) -> float:
    """extract_raw followed by scale_signal."""
    return scale_signal(extract_raw(frame, spec, bit_numbering), spec)


# ---------------------------------------------------------------------------
# Catalog CSV:
#   feature_no,message_name,message_id,signal_name,start_bit,bit_length,
#   scale,offset,min,max,correlated_with,max_deviation
# correlated_with is a ';'-separated feature index list (empty for none).
# ---------------------------------------------------------------------------

CATALOG_HEADER = (
    "feature_no,message_name,message_id,signal_name,start_bit,bit_length,"
    "scale,offset,min,max,correlated_with,max_deviation"
)


def catalog_to_csv(catalog: SignalCatalog) -> str:
    lines = [CATALOG_HEADER]
    for s in catalog:
        corr = ";".join(str(i) for i in sorted(s.correlated_with))
        lines.append(
            f"{s.feature_no},{s.message_name},{s.message_id},{s.signal_name},"
            f"{s.start_bit},{s.bit_length},{s.scale!r},{s.offset!r},"
            f"{s.min_value!r},{s.max_value!r},{corr},{s.max_deviation!r}"
        )
    return "\n".join(lines) + "\n"


def catalog_from_csv(text: str) -> SignalCatalog:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CATALOG_HEADER:
        raise CatalogError("bad or missing catalog CSV header")
    specs = []
    for ln in lines[1:]:
        cols = ln.split(",")
        if len(cols) != 12:
            raise CatalogError(f"catalog row has {len(cols)} columns, expected 12")
        corr = frozenset(int(t) for t in cols[10].split(";") if t)
        specs.append(
            SignalSpec(
                feature_no=int(cols[0]),
                message_name=cols[1],
                message_id=int(cols[2]),
                signal_name=cols[3],
                start_bit=int(cols[4]),
                bit_length=int(cols[5]),
                scale=float(cols[6]),
                offset=float(cols[7]),
                min_value=float(cols[8]),
                max_value=float(cols[9]),
                correlated_with=corr,
                max_deviation=float(cols[11]),
            )
        )
    return SignalCatalog(specs)


def load_catalog(path) -> SignalCatalog:
    with open(path, "r", encoding="ascii") as fh:
        return catalog_from_csv(fh.read())


def save_catalog(path, catalog: SignalCatalog) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(catalog_to_csv(catalog))
