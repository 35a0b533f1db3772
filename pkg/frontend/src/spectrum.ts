/**
 * Spectrum presentation helpers. The chart bins are exactly the
 * instrument channels used by the columnar export: 1024 channels at
 * 20 eV, energies reported at channel centers.
 */

export const N_CHANNELS = 1024;
export const EV_PER_CHANNEL = 20;

export function channelEnergiesKev(): Float64Array {
  const e = new Float64Array(N_CHANNELS);
  for (let i = 0; i < N_CHANNELS; i++) {
    e[i] = ((i + 0.5) * EV_PER_CHANNEL) / 1000;
  }
  return e;
}

/** Columnar export: "channel_keV counts", one row per channel. */
export function spectrumToColumns(counts: ArrayLike<number>): string {
  if (counts.length !== N_CHANNELS) {
    throw new Error(`expected ${N_CHANNELS} channels, got ${counts.length}`);
  }
  const energies = channelEnergiesKev();
  const lines = ["channel_keV counts"];
  for (let i = 0; i < N_CHANNELS; i++) {
    lines.push(`${energies[i].toFixed(3)} ${Math.trunc(counts[i])}`);
  }
  return lines.join("\n") + "\n";
}

export interface ChartPoint {
  kev: number;
  counts: number;
}

/** Points for the chart — one per channel, same binning as the export. */
export function chartPoints(counts: ArrayLike<number>): ChartPoint[] {
  const energies = channelEnergiesKev();
  const out: ChartPoint[] = [];
  for (let i = 0; i < counts.length; i++) {
    out.push({ kev: energies[i], counts: counts[i] });
  }
  return out;
}
