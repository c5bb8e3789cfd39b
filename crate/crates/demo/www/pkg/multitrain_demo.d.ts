/* tslint:disable */
/* eslint-disable */

export function clip_caption(dataset: number, sample: number): string;

/**
 * `[variance, covariance]` for points laid out as rows of `dim`.
 */
export function regularizers(points: Float64Array, dim: number, eps: number): Float64Array;

export function render_clip(dataset: number, sample: number): Float32Array;

/**
 * Interleaved `[value, derivative]` pairs of the weighted objective.
 */
export function sigma_objective(loss: number, sigmas: Float64Array): Float64Array;

/**
 * `[T, H, W, C, datasets, clips per dataset...]`.
 */
export function suite_layout(): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly clip_caption: (a: number, b: number) => [number, number, number, number];
    readonly regularizers: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly render_clip: (a: number, b: number) => [number, number, number, number];
    readonly sigma_objective: (a: number, b: number, c: number) => [number, number, number, number];
    readonly suite_layout: () => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
