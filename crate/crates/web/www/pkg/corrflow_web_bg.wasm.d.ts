/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_pair_free: (a: number, b: number) => void;
export const eulerExp: (a: number) => [number, number, number, number];
export const eulerPath: (a: number) => [number, number, number, number];
export const pair_baseline: (a: number) => [number, number];
export const pair_followup: (a: number) => [number, number];
export const pair_size: (a: number) => number;
export const pair_ssim: (a: number) => number;
export const rankMetrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const syntheticPair: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
