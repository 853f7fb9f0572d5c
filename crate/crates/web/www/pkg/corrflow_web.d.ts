/* tslint:disable */
/* eslint-disable */

/**
 * A synthetic baseline/follow-up pair, row-major `size × size` in [0, 1].
 */
export class Pair {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    baseline(): Float32Array;
    followup(): Float32Array;
    readonly size: number;
    /**
     * SSIM of the follow-up against the baseline.
     */
    readonly ssim: number;
}

/**
 * Euler solution of dz/dt = z from z(0) = 1 at t = 1 with `steps` steps,
 * returned as `[endpoint, |endpoint − e|, error(steps) / error(2·steps)]`.
 */
export function eulerExp(steps: number): Float64Array;

/**
 * Trajectory `z(t_k)` for `k = 0..=steps` of the same problem.
 */
export function eulerPath(steps: number): Float64Array;

/**
 * `[auroc, auprc]` of scores against 0/1 labels.
 */
export function rankMetrics(scores: Float32Array, labels: Uint8Array): Float64Array;

/**
 * Generates subject `index` of the synthetic set with the given label.
 */
export function syntheticPair(seed: bigint, index: number, label: string, early_signal: number, size: number): Pair;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_pair_free: (a: number, b: number) => void;
    readonly eulerExp: (a: number) => [number, number, number, number];
    readonly eulerPath: (a: number) => [number, number, number, number];
    readonly pair_baseline: (a: number) => [number, number];
    readonly pair_followup: (a: number) => [number, number];
    readonly pair_size: (a: number) => number;
    readonly pair_ssim: (a: number) => number;
    readonly rankMetrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly syntheticPair: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
