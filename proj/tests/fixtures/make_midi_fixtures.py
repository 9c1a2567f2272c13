#!/usr/bin/env python3
"""Writes the MIDI fixture files under tests/fixtures/midi.

Bytes are assembled by hand here (not by the library writer) so the parser
round-trip tests read files produced by an independent encoder. Several
files use running status, sysex, text meta events, pitch bend, controller
messages, note-on velocity 0 as note-off and meter changes.
"""

import os
import random
import struct

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "midi")


def vlq(v):
    out = [v & 0x7F]
    v >>= 7
    while v:
        out.append((v & 0x7F) | 0x80)
        v >>= 7
    return bytes(reversed(out))


def chunk(tag, body):
    return tag + struct.pack(">I", len(body)) + body


def smf(fmt, division, tracks):
    head = chunk(b"MThd", struct.pack(">HHH", fmt, len(tracks), division))
    return head + b"".join(chunk(b"MTrk", t) for t in tracks)


class TrackBuilder:
    def __init__(self, running_status=False):
        self.events = []  # (abs_tick, order, bytes-without-delta, status-or-None)
        self.running_status = running_status
        self.order = 0

    def _add(self, tick, status, data):
        self.events.append((tick, self.order, status, bytes(data)))
        self.order += 1

    def channel(self, tick, status, *data):
        self._add(tick, status, data)

    def meta(self, tick, mtype, payload):
        self._add(tick, None, bytes([0xFF, mtype]) + vlq(len(payload)) + bytes(payload))

    def sysex(self, tick, payload):
        self._add(tick, None, bytes([0xF0]) + vlq(len(payload)) + bytes(payload))

    def tempo(self, tick, bpm):
        us = int(round(60_000_000 / bpm))
        self.meta(tick, 0x51, us.to_bytes(3, "big"))

    def timesig(self, tick, num, den_pow):
        self.meta(tick, 0x58, bytes([num, den_pow, 24, 8]))

    def note(self, tick, ch, pitch, vel, dur, zero_vel_off=False):
        self.channel(tick, 0x90 | ch, pitch, vel)
        if zero_vel_off:
            self.channel(tick + dur, 0x90 | ch, pitch, 0)
        else:
            self.channel(tick + dur, 0x80 | ch, pitch, 64)

    def build(self, end_tick=None):
        evs = sorted(self.events, key=lambda e: (e[0], e[1]))
        out = bytearray()
        prev = 0
        running = None
        for tick, _, status, data in evs:
            out += vlq(tick - prev)
            prev = tick
            if status is None:
                out += data
                continue
            if self.running_status and status == running:
                out += data
            else:
                out += bytes([status]) + data
                running = status
        last = evs[-1][0] if evs else 0
        end = max(last, end_tick or 0)
        out += vlq(end - prev) + b"\xff\x2f\x00"
        return bytes(out)


def random_song(rng, fmt, division, running, bars, meter_change=False):
    beats = 4
    bar = division * beats
    conductor = TrackBuilder(running)
    conductor.meta(0, 0x03, b"conductor")
    conductor.timesig(0, 4, 2)
    conductor.tempo(0, rng.choice([90, 100, 120, 128]))
    if meter_change:
        conductor.timesig(bars * bar, 3, 2)
        conductor.timesig(bars * bar + 2 * (division * 3), 4, 2)
    if rng.random() < 0.5:
        conductor.tempo(bar, rng.choice([95, 110]))

    parts = []
    specs = [(9, 0), (0, rng.choice([33, 34, 38])), (1, rng.choice([0, 4, 25, 29])), (2, rng.choice([48, 49, 52, 40]))]
    if rng.random() < 0.3:
        specs.append((3, 118))  # percussive program, discarded by the track map
    for ch, prog in specs:
        tb = TrackBuilder(running)
        tb.meta(0, 0x03, f"part{ch}".encode())
        tb.channel(0, 0xC0 | ch, prog)
        tb.channel(0, 0xB0 | ch, 7, rng.randrange(60, 127))
        if rng.random() < 0.3:
            tb.sysex(0, [0x7E, 0x7F, 0x09, 0x01, 0xF7])
        total = bars * bar + (2 * division * 3 if meter_change else 0)
        step = division // 2
        t = 0
        while t < total:
            if rng.random() < 0.55:
                if ch == 9:
                    pitch = rng.choice([36, 38, 42, 46])
                    dur = division // 4
                elif ch == 0:
                    pitch = rng.randrange(28, 52)
                    dur = rng.choice([division // 2, division])
                else:
                    pitch = rng.randrange(48, 84)
                    dur = rng.choice([division // 2, division, 2 * division])
                jitter = rng.choice([0, 0, 0, 1, -1, division // 16])
                start = max(0, t + jitter)
                tb.note(start, ch, pitch, rng.randrange(40, 127), dur, zero_vel_off=rng.random() < 0.3)
                if ch in (1, 2) and rng.random() < 0.4:
                    tb.note(start, ch, min(127, pitch + 4), 80, dur)
                    tb.note(start, ch, min(127, pitch + 7), 80, dur)
            if ch != 9 and rng.random() < 0.1:
                tb.channel(t, 0xE0 | ch, 0, rng.randrange(32, 96))
            t += step
        parts.append(tb)

    if fmt == 0:
        merged = TrackBuilder(running)
        for tb in [conductor] + parts:
            for ev in tb.events:
                merged.events.append((ev[0], merged.order, ev[2], ev[3]))
                merged.order += 1
        return smf(0, division, [merged.build()])
    return smf(1, division, [conductor.build(end_tick=bars * bar)] + [p.build() for p in parts])


def main():
    os.makedirs(OUT, exist_ok=True)
    rng = random.Random(20240531)
    files = {}
    for k in range(20):
        fmt = 0 if k % 4 == 0 else 1
        division = [96, 120, 192, 240, 384, 480, 960][k % 7]
        running = k % 2 == 1
        bars = 2 + (k % 5)
        files[f"song_{k:02d}.mid"] = random_song(rng, fmt, division, running, bars, meter_change=(k % 6 == 5))

    # Two instruments: drums on channel 9 and a program-33 bass on channel 0.
    tb = TrackBuilder(running_status=True)
    tb.timesig(0, 4, 2)
    tb.tempo(0, 120)
    tb.channel(0, 0xC0, 33)
    tb.note(0, 9, 36, 100, 120)
    tb.note(0, 0, 40, 100, 480)
    tb.note(960, 9, 38, 100, 120, zero_vel_off=True)
    tb.note(960, 0, 43, 100, 480, zero_vel_off=True)
    files["drums_bass.mid"] = smf(0, 480, [tb.build(end_tick=1920)])

    # A single quarter note at tick 0.
    tb = TrackBuilder()
    tb.channel(0, 0xC0, 0)
    tb.note(0, 0, 60, 100, 480)
    files["single_quarter.mid"] = smf(0, 480, [tb.build(end_tick=1920)])

    # Only 3/4: nothing quantizable.
    tb = TrackBuilder()
    tb.timesig(0, 3, 2)
    tb.note(0, 0, 60, 100, 480)
    files["waltz_only.mid"] = smf(0, 480, [tb.build(end_tick=1440)])

    for name, data in sorted(files.items()):
        with open(os.path.join(OUT, name), "wb") as f:
            f.write(data)
    print(f"wrote {len(files)} files to {OUT}")


if __name__ == "__main__":
    main()
