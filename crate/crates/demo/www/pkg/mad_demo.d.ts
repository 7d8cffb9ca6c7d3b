/* tslint:disable */
/* eslint-disable */

/**
 * Angular-deviation histogram of a white-box online-SGD run.
 */
export function angular_demo(epsilon: number, steps: number, seed: number, argmax: boolean): string;

/**
 * Every defense applied to the same posterior.
 */
export function compare_defenses(y0: number, y1: number, y2: number, epsilon: number, seed: number): string;

/**
 * MAD (or MAD-argmax) answer for a 3-class posterior.
 */
export function mad_explore(y0: number, y1: number, y2: number, epsilon: number, seed: number, argmax: boolean): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly angular_demo: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly compare_defenses: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly mad_explore: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
