/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const clip_caption: (a: number, b: number) => [number, number, number, number];
export const regularizers: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const render_clip: (a: number, b: number) => [number, number, number, number];
export const sigma_objective: (a: number, b: number, c: number) => [number, number, number, number];
export const suite_layout: () => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
