import * as fs from 'fs';
import { PNG } from 'pngjs';

export interface DecodedImage {
  width: number;
  height: number;
  /** height * width * 3 bytes, RGB row-major */
  rgb: Uint8Array;
}

export function readPng(path: string): DecodedImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const rgb = new Uint8Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    rgb[i * 3] = png.data[i * 4];
    rgb[i * 3 + 1] = png.data[i * 4 + 1];
    rgb[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, rgb };
}

export function writePng(path: string, width: number, height: number, rgb: Uint8Array): void {
  const png = new PNG({ width, height });
  for (let i = 0; i < width * height; i++) {
    png.data[i * 4] = rgb[i * 3];
    png.data[i * 4 + 1] = rgb[i * 3 + 1];
    png.data[i * 4 + 2] = rgb[i * 3 + 2];
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(path, PNG.sync.write(png));
}
