import * as fs from 'fs';

import yargs from 'yargs';
import { hideBin } from 'yargs/helpers';

import { exportFeatureMaps } from './exporter';
import { availableLayers } from './network';

async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .usage('Export dense feature maps and global descriptors for the localization engine')
    .option('images', {
      type: 'string',
      demandOption: true,
      describe: 'text file listing one image path per line',
    })
    .option('out', { type: 'string', demandOption: true, describe: 'output directory' })
    .option('coarse', {
      type: 'string',
      default: 'conv5',
      describe: `coarse-role layer (${availableLayers().join(', ')})`,
    })
    .option('fine', { type: 'string', default: 'conv3', describe: 'fine-role layer' })
    .option('normalize', { type: 'boolean', default: true })
    .option('seed', { type: 'number', default: 42 })
    .strict()
    .parse();

  const listing = fs.readFileSync(argv.images, 'utf-8');
  const imagePaths = listing.split('\n').map((s) => s.trim()).filter(Boolean);
  const result = await exportFeatureMaps({
    imagePaths,
    coarseLayer: argv.coarse,
    fineLayer: argv.fine,
    outDir: argv.out,
    normalize: argv.normalize,
    seed: argv.seed,
  });
  console.log(`wrote ${result.featureFiles.length} feature maps and ${result.indexFile}`);
  return 0;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(`error: ${err.message}`);
    process.exit(1);
  },
);
