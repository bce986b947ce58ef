/**
 * Binary PGM (P5) / PPM (P6) codec for the service's 8-bit payloads.
 * Encoding always writes the canonical `P5\n<w> <h>\n255\n` header; the
 * decoder tolerates comments and arbitrary whitespace.
 */

export interface GrayImage {
  width: number;
  height: number;
  data: Uint8Array; // row-major, length width*height
}

export interface RgbImage {
  width: number;
  height: number;
  data: Uint8Array; // row-major RGB, length width*height*3
}

export class PnmError extends Error {}

export function encodePgm(img: GrayImage): Uint8Array {
  if (img.data.length !== img.width * img.height) {
    throw new PnmError(`payload ${img.data.length} != ${img.width}x${img.height}`);
  }
  const header = new TextEncoder().encode(`P5\n${img.width} ${img.height}\n255\n`);
  const out = new Uint8Array(header.length + img.data.length);
  out.set(header, 0);
  out.set(img.data, header.length);
  return out;
}

interface Header {
  magic: string;
  width: number;
  height: number;
  offset: number;
}

function isSpace(byte: number): boolean {
  return byte === 0x20 || byte === 0x09 || byte === 0x0a || byte === 0x0d || byte === 0x0c || byte === 0x0b;
}

function parseHeader(raw: Uint8Array): Header {
  const magic = String.fromCharCode(raw[0] ?? 0, raw[1] ?? 0);
  if (magic !== "P5" && magic !== "P6") {
    throw new PnmError(`not a binary PGM/PPM (magic ${JSON.stringify(magic)})`);
  }
  const fields: number[] = [];
  let pos = 2;
  while (fields.length < 3) {
    if (pos >= raw.length) throw new PnmError("truncated header");
    if (raw[pos] === 0x23) {
      // comment to end of line
      while (pos < raw.length && raw[pos] !== 0x0a) pos++;
      pos++;
    } else if (isSpace(raw[pos])) {
      pos++;
    } else {
      let end = pos;
      while (end < raw.length && !isSpace(raw[end])) end++;
      const token = String.fromCharCode(...raw.slice(pos, end));
      if (!/^\d+$/.test(token)) throw new PnmError(`bad header token ${JSON.stringify(token)}`);
      fields.push(parseInt(token, 10));
      pos = end;
    }
  }
  pos++; // single whitespace byte after maxval
  const [width, height, maxval] = fields;
  if (maxval !== 255) throw new PnmError(`only maxval 255 supported, got ${maxval}`);
  return { magic, width, height, offset: pos };
}

export function decodePgm(raw: Uint8Array): GrayImage {
  const h = parseHeader(raw);
  if (h.magic !== "P5") throw new PnmError(`expected P5, got ${h.magic}`);
  const count = h.width * h.height;
  if (raw.length - h.offset < count) {
    throw new PnmError(`payload holds ${raw.length - h.offset} bytes, expected ${count}`);
  }
  return { width: h.width, height: h.height, data: raw.slice(h.offset, h.offset + count) };
}

export function decodePpm(raw: Uint8Array): RgbImage {
  const h = parseHeader(raw);
  if (h.magic !== "P6") throw new PnmError(`expected P6, got ${h.magic}`);
  const count = h.width * h.height * 3;
  if (raw.length - h.offset < count) {
    throw new PnmError(`payload holds ${raw.length - h.offset} bytes, expected ${count}`);
  }
  return { width: h.width, height: h.height, data: raw.slice(h.offset, h.offset + count) };
}

export function b64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function bytesToB64(bytes: Uint8Array): string {
  let bin = "";
  for (let i = 0; i < bytes.length; i++) bin += String.fromCharCode(bytes[i]);
  return btoa(bin);
}
