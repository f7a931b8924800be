#!/usr/bin/env node
// SMT-LIB2 pipe server backed by the z3-solver WebAssembly build.
//
// Reads complete top-level s-expressions from stdin, evaluates each one
// against a persistent Z3 context, and writes whatever output the command
// produces to stdout. Drop-in stand-in for `z3 -in` on machines without a
// native solver binary.
//
// The command string is copied into the WASM heap and freed only after
// the evaluation settles. The package's own eval_smtlib2_string binding
// stack-allocates the string on the calling thread while the evaluation
// runs on a worker, which corrupts commands under load.

'use strict';

const { init } = require('z3-solver');

// Splits a buffer into complete top-level s-expressions. Tracks string
// literals, |quoted symbols| and ;-comments so parens inside them don't
// count. Returns [commands, remainder].
function splitCommands(buf) {
  const cmds = [];
  let depth = 0;
  let start = 0;
  let inStr = false;
  let inSym = false;
  let inComment = false;
  for (let i = 0; i < buf.length; i++) {
    const ch = buf[i];
    if (inComment) {
      if (ch === '\n') inComment = false;
      continue;
    }
    if (inStr) {
      // SMT-LIB escapes a quote by doubling it; a lone quote closes.
      if (ch === '"') {
        if (buf[i + 1] === '"') i++;
        else inStr = false;
      }
      continue;
    }
    if (inSym) {
      if (ch === '|') inSym = false;
      continue;
    }
    switch (ch) {
      case ';': inComment = true; break;
      case '"': inStr = true; break;
      case '|': inSym = true; break;
      case '(':
        if (depth === 0) start = i;
        depth++;
        break;
      case ')':
        depth--;
        if (depth === 0) cmds.push(buf.slice(start, i + 1));
        break;
      default: break;
    }
  }
  const rest = depth > 0 ? buf.slice(start) : '';
  return [cmds, rest];
}

async function main() {
  const { Z3, em } = await init();
  const ctx = Z3.mk_context(Z3.mk_config());

  // Heap-allocating variant of eval_smtlib2_string; see header comment.
  const evalString = async (cmd) => {
    const bytes = Buffer.from(cmd, 'utf8');
    const ptr = em._malloc(bytes.length + 1);
    em.HEAPU8.set(bytes, ptr);
    em.HEAPU8[ptr + bytes.length] = 0;
    try {
      return await em.async_call(() =>
        em.ccall('async_Z3_eval_smtlib2_string', 'void', ['number', 'number'], [ctx, ptr])
      );
    } finally {
      em._free(ptr);
    }
  };

  let pending = '';
  let chain = Promise.resolve();

  const evalOne = async (cmd) => {
    if (/^\(\s*exit\s*\)$/.test(cmd)) {
      process.exit(0);
    }
    let out;
    try {
      out = await evalString(cmd);
    } catch (e) {
      out = `(error "${String(e).replace(/"/g, "'")}")\n`;
    }
    if (out && out.length > 0) {
      if (!out.endsWith('\n')) out += '\n';
      await new Promise((resolve) => process.stdout.write(out, resolve));
    }
  };

  process.stdin.setEncoding('utf8');
  process.stdin.on('data', (chunk) => {
    pending += chunk;
    const [cmds, rest] = splitCommands(pending);
    pending = rest;
    for (const c of cmds) {
      chain = chain.then(() => evalOne(c));
    }
  });
  process.stdin.on('end', () => {
    chain.then(() => process.exit(0));
  });
}

main().catch((e) => {
  process.stderr.write(`z3_stdio fatal: ${e}\n`);
  process.exit(1);
});
