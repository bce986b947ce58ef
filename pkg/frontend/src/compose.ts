/**
 * Client-side open-set recomposition.
 *
 * The service transports 8-bit anomaly maps and composes its own open-set
 * map on the same quantized domain, so applying the identical integer rule
 * here reproduces the server result pixel for pixel: a pixel turns into
 * the anomaly id exactly when its byte value strictly exceeds
 * round(255 * lambda).
 */

export const ANOMALY_ID = 254;
export const IGNORE_ID = 255;

export function thresholdByte(lambdaOut: number): number {
  if (!(lambdaOut >= 0 && lambdaOut <= 1)) {
    throw new RangeError(`lambda_out must lie in [0, 1], got ${lambdaOut}`);
  }
  return Math.round(255 * lambdaOut);
}

export function composeOpenSet(
  closeset: Uint8Array,
  anomalyU8: Uint8Array,
  lambdaOut: number,
): Uint8Array {
  if (closeset.length !== anomalyU8.length) {
    throw new RangeError(`map sizes differ: ${closeset.length} vs ${anomalyU8.length}`);
  }
  const thr = thresholdByte(lambdaOut);
  const out = new Uint8Array(closeset);
  for (let i = 0; i < out.length; i++) {
    if (anomalyU8[i] > thr) out[i] = ANOMALY_ID;
  }
  return out;
}

export function countAnomalous(openset: Uint8Array): number {
  let n = 0;
  for (let i = 0; i < openset.length; i++) {
    if (openset[i] === ANOMALY_ID) n++;
  }
  return n;
}
